"""Network description, weight persistence and prediction."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from deltaiou.ops import PAD_MODES, ShapeError

CONV, RELU, MAXPOOL, FLATTEN, DENSE = "conv", "relu", "maxpool", "flatten", "dense"
LAYER_KINDS = (CONV, RELU, MAXPOOL, FLATTEN, DENSE)
PARAM_KINDS = (CONV, DENSE)

NEGATIVE, POSITIVE = 0, 1


class WeightFileError(ValueError):
    """A weight container is missing, corrupt, or disagrees with its manifest."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``weight``/``bias`` are set only for conv and dense layers."""

    kind: str
    index: int
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    pad_mode: str = "zeros"
    window: int = 0
    units: int = 0
    weight: np.ndarray | None = field(default=None, repr=False, compare=False)
    bias: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float32, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        layers = []
        for l in self.layers:
            if l.weight is not None and l.weight.flags.writeable or l.bias is not None and l.bias.flags.writeable:
                l = replace(
                    l,
                    weight=None if l.weight is None else _frozen(l.weight),
                    bias=None if l.bias is None else _frozen(l.bias),
                )
            layers.append(l)
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("model has no layers")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ShapeError(f"layer {i} carries index {layer.index}")
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == CONV and layer.pad_mode not in PAD_MODES:
                raise ShapeError(f"layer {i}: unknown padding mode {layer.pad_mode!r}")
            if layer.has_params and (layer.weight is None or layer.bias is None):
                raise ShapeError(f"layer {i} ({layer.kind}) must carry both weight and bias")
            shape = _layer_output_shape(layer, shape)
        last = self.layers[-1]
        if last.kind != DENSE or shape != (2,):
            raise ShapeError(f"final layer must be dense with 2 outputs; got {last.kind} -> {shape}")

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer, in order."""
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = _layer_output_shape(layer, shape)
            shapes.append(shape)
        return shapes

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers if l.has_params)

    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_params]

    def with_params(self, params: dict[int, tuple[np.ndarray, np.ndarray]]) -> "ModelSpec":
        """Copy of the model with new ``(weight, bias)`` for the given layer indices."""
        layers = [
            replace(l, weight=_frozen(params[l.index][0]), bias=_frozen(params[l.index][1]))
            if l.index in params
            else l
            for l in self.layers
        ]
        return ModelSpec(layers, self.input_shape)

    def same_weights(self, other: "ModelSpec") -> bool:
        if [ _geometry(l) for l in self.layers] != [
            _geometry(l) for l in other.layers
        ]:
            return False
        return self.input_shape == other.input_shape and all(
            np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.param_layers(), other.param_layers())
        )


def _geometry(l: LayerSpec) -> tuple:
    return (l.kind, l.out_channels, l.kernel, l.stride, l.pad, l.pad_mode, l.window, l.units)


def _layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    i = layer.index
    if layer.kind == CONV:
        if len(shape) != 3:
            raise ShapeError(f"layer {i} (conv) needs (C,H,W) input, got {shape}")
        k, c, kh, kw = layer.weight.shape
        if c != shape[0] or layer.bias.shape != (k,):
            raise ShapeError(f"layer {i} (conv): kernel {layer.weight.shape} / bias {layer.bias.shape} vs input {shape}")
        dims = []
        for size, kk in ((shape[1], kh), (shape[2], kw)):
            span = size + 2 * layer.pad - kk
            if span < 0 or span % layer.stride:
                raise ShapeError(f"layer {i} (conv): extent {size} does not tile")
            dims.append(span // layer.stride + 1)
        return (k, *dims)
    if layer.kind == RELU:
        return shape
    if layer.kind == MAXPOOL:
        if len(shape) != 3 or shape[1] % layer.window or shape[2] % layer.window:
            raise ShapeError(f"layer {i} (maxpool {layer.window}) cannot tile input {shape}")
        return (shape[0], shape[1] // layer.window, shape[2] // layer.window)
    if layer.kind == FLATTEN:
        return (int(np.prod(shape)),)
    # dense
    if len(shape) != 1 or layer.weight.shape[1] != shape[0] or layer.bias.shape != (layer.weight.shape[0],):
        raise ShapeError(f"layer {i} (dense): weight {layer.weight.shape} vs input {shape}")
    return (layer.weight.shape[0],)


def build_tiny_vgg(input_h: int = 64, input_w: int = 64, seed: int = 0, pad_mode: str = "reflect") -> ModelSpec:
    """Three conv/ReLU/pool blocks (8, 16, 32 channels), then Dense(32)-ReLU-Dense(2).

    Weights are He-normal from ``seed``; biases start at zero. Convolutions
    pad by reflection by default: zero padding paints a dark frame around
    every image, which the network and both explainers then pick up as an edge.
    """
    if input_h % 8 or input_w % 8 or input_h <= 0 or input_w <= 0:
        raise ShapeError(f"TinyVGG input must be divisible by 8, got {input_h}x{input_w}")
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []

    def add(kind, **kw):
        layers.append(LayerSpec(kind=kind, index=len(layers), **kw))

    cin = 1
    for cout in (8, 16, 32):
        w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        add(CONV, out_channels=cout, kernel=3, stride=1, pad=1, pad_mode=pad_mode, weight=_frozen(w), bias=_frozen(np.zeros(cout)))
        add(RELU)
        add(MAXPOOL, window=2, stride=2)
        cin = cout
    add(FLATTEN)
    flat = 32 * (input_h // 8) * (input_w // 8)
    for fan_in, units in ((flat, 32), (32, 2)):
        w = rng.standard_normal((units, fan_in)) * np.sqrt(2.0 / fan_in)
        add(DENSE, units=units, weight=_frozen(w), bias=_frozen(np.zeros(units)))
        if units == 32:
            add(RELU)
    return ModelSpec(layers, (1, input_h, input_w))


def last_conv_activation(model: ModelSpec) -> int:
    """Index of the last conv layer's post-ReLU activation (the conv itself if no ReLU follows)."""
    last_conv = max(l.index for l in model.layers if l.kind == CONV)
    nxt = last_conv + 1
    if nxt < len(model.layers) and model.layers[nxt].kind == RELU:
        return nxt
    return last_conv


# -- weight files ---------------------------------------------------------------

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _checksum(raw: bytes) -> str:
    return hashlib.blake2b(raw, digest_size=8).hexdigest()


def save_weights(model: ModelSpec, path: str | os.PathLike) -> None:
    """Write ``path/manifest.json`` plus one little-endian float32 ``.bin`` per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in model.layers:
        entry = {
            "index": layer.index,
            "kind": layer.kind,
            "out_channels": layer.out_channels,
            "kernel": layer.kernel,
            "stride": layer.stride,
            "pad": layer.pad,
            "pad_mode": layer.pad_mode,
            "window": layer.window,
            "units": layer.units,
        }
        if layer.has_params:
            tensors = {}
            for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                fname = f"layer{layer.index:02d}_{name}.bin"
                (root / fname).write_bytes(raw)
                tensors[name] = {"file": fname, "shape": list(arr.shape), "checksum": _checksum(raw)}
            entry["tensors"] = tensors
        layers.append(entry)
    manifest = {"format": FORMAT_VERSION, "dtype": "float32-le", "input_shape": list(model.input_shape), "layers": layers}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_weights(path: str | os.PathLike) -> ModelSpec:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise WeightFileError(f"no weight manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"unreadable manifest {mpath}: {exc}") from exc
    layers = []
    for entry in manifest["layers"]:
        params = {}
        for name, meta in entry.get("tensors", {}).items():
            fpath = root / meta["file"]
            if not fpath.is_file():
                raise WeightFileError(f"layer {entry['index']} {name}: missing file {fpath}")
            raw = fpath.read_bytes()
            if _checksum(raw) != meta["checksum"]:
                raise WeightFileError(f"layer {entry['index']} {name}: checksum mismatch in {fpath}")
            shape = tuple(meta["shape"])
            if len(raw) != 4 * int(np.prod(shape)):
                raise WeightFileError(
                    f"layer {entry['index']} {name}: manifest shape {shape} disagrees with {len(raw) // 4} stored values"
                )
            params[name] = _frozen(np.frombuffer(raw, dtype="<f4").reshape(shape))
        layers.append(
            LayerSpec(
                kind=entry["kind"],
                index=entry["index"],
                out_channels=entry["out_channels"],
                kernel=entry["kernel"],
                stride=entry["stride"],
                pad=entry["pad"],
                pad_mode=entry.get("pad_mode", "zeros"),
                window=entry["window"],
                units=entry["units"],
                **params,
            )
        )
    try:
        return ModelSpec(layers, tuple(manifest["input_shape"]))
    except ShapeError as exc:
        raise WeightFileError(f"weights in {root} are inconsistent: {exc}") from exc


# -- prediction -----------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    label: int
    confidence: float


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def prediction_from_logits(logits: np.ndarray) -> Prediction:
    """Argmax label with ties going to the positive (defect) class."""
    logits = np.asarray(logits)
    probs = softmax(logits)
    label = POSITIVE if logits[POSITIVE] >= logits[NEGATIVE] else NEGATIVE
    return Prediction(logits=logits, probabilities=probs, label=label, confidence=float(probs.max()))


def predict(model: ModelSpec, image: np.ndarray) -> Prediction:
    from deltaiou.autodiff import forward_trace

    return prediction_from_logits(forward_trace(model, image).logits)
