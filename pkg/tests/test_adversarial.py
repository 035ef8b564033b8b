import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltaiou.adversarial import EnhancementConfig, enhance
from deltaiou.autodiff import logit
from deltaiou.model import DENSE, FLATTEN, LayerSpec, ModelSpec

from conftest import tiny_model


def _linear_head(w1: np.ndarray) -> ModelSpec:
    """flatten-dense(2) whose positive logit is ``w1 . x``."""
    n = w1.size
    weight = np.stack([np.zeros(n), w1.ravel()]).astype(np.float32)
    return ModelSpec(
        [LayerSpec(FLATTEN, 0), LayerSpec(DENSE, 1, units=2, weight=weight, bias=np.zeros(2, np.float32))],
        (1, *w1.shape),
    )


def test_zero_iterations_is_identity():
    x = np.random.default_rng(0).random((1, 6, 6)).astype(np.float32)
    out = enhance(x, tiny_model(0), EnhancementConfig(iterations=0))
    assert out.tobytes() == x.tobytes()
    assert out is not x


def test_zero_gradient_leaves_image_unchanged():
    m = _linear_head(np.zeros((4, 4)))
    x = np.random.default_rng(1).random((1, 4, 4)).astype(np.float32)
    for t in (1, 2, 5):
        assert enhance(x, m, EnhancementConfig(alpha=0.5, iterations=t)).tobytes() == x.tobytes()


def test_linear_one_step_moves_by_alpha_w():
    w = np.array([[0.5, -1.0], [2.0, 0.0]])
    x = np.full((1, 2, 2), 0.5, np.float32)
    out = enhance(x, _linear_head(w), EnhancementConfig(alpha=0.01, iterations=1))
    np.testing.assert_allclose(out[0], 0.5 + 0.01 * w, atol=1e-7)


def test_steps_clamp_to_unit_interval():
    w = np.array([[100.0, -100.0], [1.0, -1.0]])
    x = np.full((1, 2, 2), 0.5, np.float32)
    out = enhance(x, _linear_head(w), EnhancementConfig(alpha=0.01, iterations=3))
    np.testing.assert_allclose(out[0], [[1.0, 0.0], [0.53, 0.47]], atol=1e-6)


def test_keeps_input_shape():
    m = tiny_model(2)
    x = np.random.default_rng(2).random((6, 6)).astype(np.float32)
    assert enhance(x, m).shape == (6, 6)


@pytest.mark.parametrize("kw", [{"alpha": 0}, {"alpha": -0.1}, {"iterations": -1}, {"iterations": 1.5}, {"lo": 1, "hi": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EnhancementConfig(**kw)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-4, 0.5), st.integers(0, 4))
def test_output_in_unit_interval_and_deterministic(seed, alpha, t):
    m = tiny_model(seed % 500, bias_scale=0.5)
    x = np.random.default_rng(seed).random((1, 6, 6)).astype(np.float32)
    cfg = EnhancementConfig(alpha=alpha, iterations=t)
    a, b = enhance(x, m, cfg), enhance(x, m, cfg)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_positive_logit_monotone_on_linear_model(seed, t):
    rng = np.random.default_rng(seed)
    m = _linear_head(rng.normal(size=(3, 3)))
    x = rng.uniform(0.3, 0.7, (1, 3, 3)).astype(np.float32)
    prev = logit(m, x, 1)
    for _ in range(t):
        x = enhance(x, m, EnhancementConfig(alpha=0.01, iterations=1))
        cur = logit(m, x, 1)
        assert cur >= prev
        prev = cur
