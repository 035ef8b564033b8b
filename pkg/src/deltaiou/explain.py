"""Grad-CAM and FullGrad heatmaps, brought to input resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltaiou.autodiff import ForwardTrace, GradientBundle
from deltaiou.ops import ShapeError

GRADCAM_C0, GRADCAM_C1, FULLGRAD = "gradcam_c0", "gradcam_c1", "fullgrad"
NATIVE, INPUT = "native", "input"


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    source: str
    resolution: str = NATIVE

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def gradcam_source(class_index: int) -> str:
    return GRADCAM_C1 if class_index == 1 else GRADCAM_C0


def grad_cam(trace: ForwardTrace, bundle: GradientBundle, layer_id: int, class_index: int, model=None) -> Heatmap:
    """Channel weights are spatial means of the logit gradient; the map is ReLU of the weighted sum."""
    if bundle.class_index != class_index:
        raise ValueError(f"gradient bundle is seeded on class {bundle.class_index}, requested {class_index}")
    if model is not None and model.layers[layer_id].kind in ("flatten", "dense"):
        raise ShapeError(f"layer {layer_id} ({model.layers[layer_id].kind}) is not a convolutional activation")
    acts = trace.activations[layer_id]
    grads = bundle.activation_grads[layer_id]
    if acts.ndim != 3:
        raise ShapeError(f"layer {layer_id} activation {acts.shape} is not a (C,H,W) feature map")
    weights = grads.mean(axis=(1, 2))
    cam = np.tensordot(weights, acts, axes=([0], [0]))
    return Heatmap(np.maximum(cam, 0), gradcam_source(class_index), NATIVE)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upsample_bilinear(heatmap: Heatmap | np.ndarray, target_h: int, target_w: int) -> Heatmap:
    if isinstance(heatmap, Heatmap):
        values, source = heatmap.values, heatmap.source
    else:
        values, source = np.asarray(heatmap), ""
    h, w = values.shape
    if target_h < h or target_w < w:
        raise ShapeError(f"upsample_bilinear cannot shrink {values.shape} to {(target_h, target_w)}")
    y0, y1, fy = _bilinear_axis(h, target_h)
    x0, x1, fx = _bilinear_axis(w, target_w)
    fy, fx = fy[:, None], fx[None, :]
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bottom = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    # interpolation weights sum to one, but rounding can step just outside the source range
    out = np.clip(out, values.min(), values.max()).astype(values.dtype, copy=False)
    return Heatmap(out, source, INPUT)


def minmax(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def psi_postprocess(raw: Heatmap | np.ndarray) -> Heatmap | np.ndarray:
    """Absolute value followed by per-map min-max rescaling."""
    if isinstance(raw, Heatmap):
        return Heatmap(minmax(np.abs(raw.values)), raw.source, raw.resolution)
    return minmax(np.abs(raw))


def full_grad(trace: ForwardTrace, bundle: GradientBundle, input_image: np.ndarray, model) -> Heatmap:
    """Input-gradient term plus every bias-gradient term, normalised to [0, 1].

    Each conv channel contributes ``psi(grad_field * bias)`` upsampled to the
    input size. Dense biases have no spatial extent; each adds the constant
    ``|grad * bias|``, which the final normalisation removes unless the map is
    otherwise flat.
    """
    image = np.asarray(input_image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    _, h, w = image.shape
    total = np.zeros((h, w))
    for channel in np.asarray(bundle.input_grad, dtype=np.float64) * image:
        total += psi_postprocess(channel)
    for layer in model.param_layers():
        i = layer.index
        if i not in bundle.bias_grads:
            raise ValueError(f"gradient bundle lacks bias gradients for layer {i}")
        field = np.asarray(bundle.activation_grads[i], dtype=np.float64)
        bias = layer.bias.astype(np.float64)
        if layer.kind == "conv":
            for k in range(bias.size):
                term = psi_postprocess(field[k] * bias[k])
                total += upsample_bilinear(term, h, w).values
        else:
            total += np.abs(field * bias).sum()
    return Heatmap(minmax(total), FULLGRAD, INPUT)


def to_pgm_bytes(values: np.ndarray) -> bytes:
    """8-bit binary PGM of a map in [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    q = np.rint(v * 255).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()
