"""Mini-batch gradient descent for TinyVGG on a synthetic dataset."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from deltaiou.autodiff import backward, forward_trace
from deltaiou.model import ModelSpec, POSITIVE, predict, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    defect_weight: float = 5.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.defect_weight <= 0:
            raise ValueError("defect_weight must be positive")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for i, (l, a) in enumerate(zip(self.loss, self.accuracy), 1):
            w.writerow([i, repr(l), repr(a)])
        return buf.getvalue()


def cross_entropy_loss_grad(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient ``softmax - onehot``."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    grad = softmax(z)
    grad[label] -= 1.0
    return float(lse - z[label]), grad


def train(
    model: ModelSpec,
    images: list[np.ndarray],
    labels: list[int],
    config: TrainConfig = TrainConfig(),
) -> tuple[ModelSpec, TrainHistory]:
    """Train on in-memory samples. Batch gradients are reduced in sample order."""
    if not images:
        raise ValueError("training split is empty")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    params = {l.index: (l.weight.copy(), l.bias.copy()) for l in model.param_layers()}
    history = TrainHistory()
    lr = np.float32(config.learning_rate)
    n = len(images)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total_loss, correct, weight_sum = 0.0, 0, 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            current = model.with_params(params)
            gsum = {i: (np.zeros_like(w), np.zeros_like(b)) for i, (w, b) in params.items()}
            bweight = 0.0
            for j in batch:
                trace = forward_trace(current, images[j])
                loss, dlogits = cross_entropy_loss_grad(trace.logits, labels[j])
                cw = config.defect_weight if labels[j] == POSITIVE else 1.0
                bundle = backward(trace, current, (cw * dlogits).astype(np.float32))
                for i in gsum:
                    gsum[i][0][...] += bundle.weight_grads[i]
                    gsum[i][1][...] += bundle.bias_grads[i]
                bweight += cw
                total_loss += cw * loss
                weight_sum += cw
                pred = POSITIVE if trace.logits[1] >= trace.logits[0] else 0
                correct += int(pred == labels[j])
            scale = lr / np.float32(bweight)
            params = {i: (w - scale * gsum[i][0], b - scale * gsum[i][1]) for i, (w, b) in params.items()}
        history.loss.append(total_loss / weight_sum)
        history.accuracy.append(correct / n)
        log.info("epoch %d loss %.4f acc %.3f", epoch + 1, history.loss[-1], history.accuracy[-1])
    return model.with_params(params), history


def train_on_manifest(model: ModelSpec, manifest, config: TrainConfig = TrainConfig(), split: str = "train"):
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    return train(model, [manifest.load(r) for r in records], [r.label for r in records], config)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(model: ModelSpec, images, labels) -> Confusion:
    tp = fp = tn = fn = 0
    for image, y in zip(images, labels):
        p = predict(model, image).label
        if p == POSITIVE:
            tp, fp = (tp + 1, fp) if y == POSITIVE else (tp, fp + 1)
        else:
            tn, fn = (tn + 1, fn) if y != POSITIVE else (tn, fn + 1)
    return Confusion(tp, fp, tn, fn)


def evaluate_classifier(model: ModelSpec, manifest, split: str) -> Confusion:
    records = manifest.split(split)
    return confusion(model, [manifest.load(r) for r in records], [r.label for r in records])
