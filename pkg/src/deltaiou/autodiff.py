"""Recording forward pass and exact reverse-mode gradients for a :class:`ModelSpec`.

Gradients are always taken of pre-softmax logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltaiou import ops
from deltaiou.ops import ShapeError


@dataclass(frozen=True)
class ForwardTrace:
    """Everything recorded during one forward pass.

    ``activations[l]`` is the output of layer ``l``; ``pool_indices`` maps a
    max-pool layer index to its winner offsets.
    """

    model_id: int
    input: np.ndarray
    activations: tuple[np.ndarray, ...]
    pool_indices: dict[int, np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


@dataclass(frozen=True)
class GradientBundle:
    """Gradients of one logit seed.

    ``activation_grads[l]`` is the gradient w.r.t. the output of layer ``l``.
    For conv and dense layers that same array is the spatial field of the bias
    gradient; ``bias_grads`` holds its spatial sum.
    """

    class_index: int | None
    input_grad: np.ndarray
    activation_grads: tuple[np.ndarray, ...]
    bias_grads: dict[int, np.ndarray]
    weight_grads: dict[int, np.ndarray]


def _as_image(model, image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if tuple(image.shape) != model.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {model.input_shape}")
    if image.dtype not in (np.float32, np.float64):
        image = image.astype(np.float32)
    return image


def _param(layer, dtype):
    # float64 evaluation is used only by the finite-difference oracle
    if dtype == np.float32:
        return layer.weight, layer.bias
    return layer.weight.astype(dtype), layer.bias.astype(dtype)


def forward_trace(model, image: np.ndarray) -> ForwardTrace:
    x = _as_image(model, image)
    acts = []
    pools = {}
    for layer in model.layers:
        if layer.kind == "conv":
            w, b = _param(layer, x.dtype)
            x = ops.conv2d_forward(x, w, b, layer.stride, layer.pad, layer.pad_mode)
        elif layer.kind == "relu":
            x = ops.relu(x)
        elif layer.kind == "maxpool":
            x, idx = ops.maxpool_forward(x, layer.window, layer.stride)
            pools[layer.index] = idx
        elif layer.kind == "flatten":
            x = x.reshape(-1)
        else:
            w, b = _param(layer, x.dtype)
            x = ops.dense_forward(x, w, b)
        acts.append(x)
    return ForwardTrace(model_id=id(model), input=_as_image(model, image), activations=tuple(acts), pool_indices=pools)


def backward(trace: ForwardTrace, model, seed: np.ndarray, class_index: int | None = None) -> GradientBundle:
    """Propagate ``seed`` (gradient w.r.t. the logits) back through the network."""
    if trace.model_id != id(model) or len(trace.activations) != len(model.layers):
        raise ShapeError("trace was not produced by this model")
    seed = np.asarray(seed, dtype=trace.logits.dtype)
    if seed.shape != trace.logits.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match logits {trace.logits.shape}")
    act_grads: list[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    bias_grads: dict[int, np.ndarray] = {}
    weight_grads: dict[int, np.ndarray] = {}
    g = seed
    for layer in reversed(model.layers):
        i = layer.index
        act_grads[i] = g
        x_in = trace.activations[i - 1] if i > 0 else trace.input
        if layer.kind == "conv":
            w, _ = _param(layer, x_in.dtype)
            g, gw, gb = ops.conv2d_backward(g, x_in, w, layer.stride, layer.pad, layer.pad_mode)
            weight_grads[i], bias_grads[i] = gw, gb
        elif layer.kind == "relu":
            g = ops.relu_backward(g, trace.activations[i])
        elif layer.kind == "maxpool":
            g = ops.maxpool_backward(g, trace.pool_indices[i], x_in.shape, layer.window, layer.stride)
        elif layer.kind == "flatten":
            g = g.reshape(x_in.shape)
        else:
            w, _ = _param(layer, x_in.dtype)
            g, gw, gb = ops.dense_backward(g, x_in, w)
            weight_grads[i], bias_grads[i] = gw, gb
    return GradientBundle(
        class_index=class_index,
        input_grad=g,
        activation_grads=tuple(act_grads),
        bias_grads=bias_grads,
        weight_grads=weight_grads,
    )


def backward_from_logit(trace: ForwardTrace, model, class_index: int) -> GradientBundle:
    if class_index not in (0, 1):
        raise ValueError(f"class_index must be 0 or 1, got {class_index!r}")
    seed = np.zeros_like(trace.logits)
    seed[class_index] = 1
    return backward(trace, model, seed, class_index)


def logit(model, image: np.ndarray, class_index: int) -> float:
    return float(forward_trace(model, image).logits[class_index])


def finite_difference_gradient(model, image: np.ndarray, class_index: int, epsilon: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of d(logit)/d(input), evaluated in float64."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = _as_image(model, image).astype(np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        up = logit(model, x, class_index)
        flat[j] = orig - epsilon
        down = logit(model, x, class_index)
        flat[j] = orig
        gflat[j] = (up - down) / (2 * epsilon)
    return grad


def finite_difference_param_gradient(
    model, image: np.ndarray, class_index: int, epsilon: float = 1e-3
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Central differences of the logit w.r.t. every weight and bias, in float64."""
    x = _as_image(model, image).astype(np.float64)
    params = {l.index: (l.weight.astype(np.float64), l.bias.astype(np.float64)) for l in model.param_layers()}
    out = {}
    for idx, (w, b) in params.items():
        grads = []
        for arr in (w, b):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                up = _logit64(model, params, x, class_index)
                flat[j] = orig - epsilon
                down = _logit64(model, params, x, class_index)
                flat[j] = orig
                gflat[j] = (up - down) / (2 * epsilon)
            grads.append(g)
        out[idx] = (grads[0], grads[1])
    return out


def _logit64(model, params, x, class_index) -> float:
    for layer in model.layers:
        if layer.kind == "conv":
            w, b = params[layer.index]
            x = ops.conv2d_forward(x, w, b, layer.stride, layer.pad, layer.pad_mode)
        elif layer.kind == "relu":
            x = ops.relu(x)
        elif layer.kind == "maxpool":
            x, _ = ops.maxpool_forward(x, layer.window, layer.stride)
        elif layer.kind == "flatten":
            x = x.reshape(-1)
        else:
            w, b = params[layer.index]
            x = ops.dense_forward(x, w, b)
    return float(x[class_index])
