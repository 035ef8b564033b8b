"""Per-sample scoring: prediction, three heatmaps, Otsu masks, delta-IoU and verdicts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltaiou.adversarial import EnhancementConfig, enhance
from deltaiou.autodiff import backward_from_logit, forward_trace
from deltaiou.explain import Heatmap, full_grad, grad_cam, minmax, upsample_bilinear
from deltaiou.gate import (
    BinaryMask,
    GateDecision,
    SuspicionScore,
    binarize,
    confidence_baseline,
    delta_iou,
    gate_decision,
    otsu_threshold,
)
from deltaiou.model import Prediction, last_conv_activation, prediction_from_logits


@dataclass(frozen=True)
class ScoreConfig:
    beta: float = 0.2
    tau: float = 0.95
    alpha: float = 0.01
    iters: int = 2
    enhance: bool = False
    layer: int | None = None
    # class used to seed FullGrad: "predicted", 0 or 1
    fullgrad_seed: str | int = "predicted"

    def __post_init__(self):
        if not -1 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [-1, 1], got {self.beta}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.fullgrad_seed not in ("predicted", 0, 1):
            raise ValueError(f"fullgrad_seed must be 'predicted', 0 or 1, got {self.fullgrad_seed!r}")
        EnhancementConfig(self.alpha, self.iters)

    def enhancement(self) -> EnhancementConfig:
        return EnhancementConfig(self.alpha, self.iters)


@dataclass(frozen=True)
class SampleScore:
    prediction: Prediction
    explained_prediction: Prediction
    explained_image: np.ndarray
    heatmaps: dict[str, Heatmap]
    masks: dict[str, BinaryMask]
    score: SuspicionScore
    decision: GateDecision
    baseline: GateDecision


def explain_image(model, image: np.ndarray, layer: int | None = None, fullgrad_seed="predicted"):
    """Return ``(prediction, heatmaps)`` with all maps at input resolution in [0, 1]."""
    layer = last_conv_activation(model) if layer is None else layer
    trace = forward_trace(model, image)
    pred = prediction_from_logits(trace.logits)
    _, h, w = model.input_shape
    maps = {}
    bundles = {}
    for c in (0, 1):
        bundles[c] = backward_from_logit(trace, model, c)
        cam = grad_cam(trace, bundles[c], layer, c, model)
        up = upsample_bilinear(cam, h, w)
        maps[up.source] = Heatmap(minmax(up.values), up.source, up.resolution)
    seed = pred.label if fullgrad_seed == "predicted" else int(fullgrad_seed)
    maps["fullgrad"] = full_grad(trace, bundles[seed], trace.input, model)
    return pred, maps


def score_image(model, image: np.ndarray, config: ScoreConfig = ScoreConfig(), sample_id: str = "") -> SampleScore:
    """Gate the model's prediction on ``image``.

    With enhancement on, heatmaps come from the enhanced image while the
    verdict still concerns the prediction on the original image.
    """
    pred = prediction_from_logits(forward_trace(model, image).logits)
    explained = enhance(image, model, config.enhancement()) if config.enhance else np.asarray(image, dtype=np.float32)
    explained_pred, maps = explain_image(model, explained, config.layer, config.fullgrad_seed)
    masks = {name: binarize(m, otsu_threshold(m)) for name, m in maps.items()}
    score = delta_iou(masks["gradcam_c1"], masks["gradcam_c0"], masks["fullgrad"])
    return SampleScore(
        prediction=pred,
        explained_prediction=explained_pred,
        explained_image=explained,
        heatmaps=maps,
        masks=masks,
        score=score,
        decision=gate_decision(pred, score, config.beta, sample_id),
        baseline=confidence_baseline(pred, config.tau, sample_id, score.delta),
    )
