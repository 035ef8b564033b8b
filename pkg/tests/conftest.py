import numpy as np
import pytest

from deltaiou.model import CONV, DENSE, FLATTEN, MAXPOOL, RELU, LayerSpec, ModelSpec


def tiny_model(seed: int, size: int = 6, channels: int = 2, hidden: int = 4, bias_scale: float = 0.1) -> ModelSpec:
    """conv(3x3, pad 1)-relu-maxpool(2)-flatten-dense-relu-dense(2) with random weights and biases."""
    rng = np.random.default_rng(seed)
    flat = channels * (size // 2) ** 2
    layers = [
        LayerSpec(CONV, 0, out_channels=channels, kernel=3, pad=1,
                  weight=rng.normal(0, 0.6, (channels, 1, 3, 3)).astype(np.float32),
                  bias=rng.normal(0, bias_scale, channels).astype(np.float32)),
        LayerSpec(RELU, 1),
        LayerSpec(MAXPOOL, 2, window=2, stride=2),
        LayerSpec(FLATTEN, 3),
        LayerSpec(DENSE, 4, units=hidden,
                  weight=rng.normal(0, 0.6, (hidden, flat)).astype(np.float32),
                  bias=rng.normal(0, bias_scale, hidden).astype(np.float32)),
        LayerSpec(RELU, 5),
        LayerSpec(DENSE, 6, units=2,
                  weight=rng.normal(0, 0.6, (2, hidden)).astype(np.float32),
                  bias=rng.normal(0, bias_scale, 2).astype(np.float32)),
    ]
    return ModelSpec(layers, (1, size, size))


def linear_model(seed: int, size: int = 4) -> ModelSpec:
    """flatten-dense(3)-dense(2): no ReLU, no pooling."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(FLATTEN, 0),
        LayerSpec(DENSE, 1, units=3, weight=rng.normal(size=(3, size * size)).astype(np.float32),
                  bias=rng.normal(size=3).astype(np.float32)),
        LayerSpec(DENSE, 2, units=2, weight=rng.normal(size=(2, 3)).astype(np.float32),
                  bias=rng.normal(size=2).astype(np.float32)),
    ]
    return ModelSpec(layers, (1, size, size))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(seed: int) -> ModelSpec:
    """Random conv/ReLU/maxpool/dense stack with nonzero biases and mixed padding."""
    rng = np.random.default_rng(seed)
    size = int(rng.choice([4, 6, 8]))
    shape = (1, size, size)
    layers: list[LayerSpec] = []

    def add(kind, **kw):
        layers.append(LayerSpec(kind, len(layers), **kw))

    for _ in range(int(rng.integers(1, 3))):
        c, h = shape[0], shape[1]
        k = int(rng.choice([1, 3])) if h >= 3 else 1
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        out = int(rng.integers(1, 4))
        mode = str(rng.choice(["zeros", "reflect"]))
        add(CONV, out_channels=out, kernel=k, pad=pad, pad_mode=mode,
            weight=rng.normal(0, 0.7, (out, c, k, k)).astype(np.float32),
            bias=rng.normal(0, 0.3, out).astype(np.float32))
        h = h + 2 * pad - k + 1
        add(RELU)
        shape = (out, h, h)
        if h % 2 == 0 and h >= 2 and rng.random() < 0.7:
            add(MAXPOOL, window=2, stride=2)
            shape = (out, h // 2, h // 2)
    add(FLATTEN)
    n = int(np.prod(shape))
    hidden = int(rng.integers(2, 6))
    add(DENSE, units=hidden, weight=rng.normal(0, 0.7, (hidden, n)).astype(np.float32),
        bias=rng.normal(0, 0.3, hidden).astype(np.float32))
    add(RELU)
    add(DENSE, units=2, weight=rng.normal(0, 0.7, (2, hidden)).astype(np.float32),
        bias=rng.normal(0, 0.3, 2).astype(np.float32))
    return ModelSpec(layers, (1, size, size))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    out = lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
