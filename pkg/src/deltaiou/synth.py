"""Synthetic surface-defect images and PGM image I/O.

A sample is a band-pass noise texture; defect samples additionally carry one to
three thin dark polyline scratches with blurred edges. Dataset layout::

    root/manifest.json
    root/<split>/images/<id>.pgm
    root/<split>/masks/<id>.pgm      (defect samples only)
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class ImageFormatError(ValueError):
    pass


# -- PGM ------------------------------------------------------------------------

_HEADER = re.compile(rb"P5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def encode_pgm(values: np.ndarray) -> bytes:
    """Quantise a 2-D map (or a ``(1, H, W)`` tensor) in [0, 1] to 8-bit P5 bytes."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise ImageFormatError(f"PGM needs a single-channel image, got shape {v.shape}")
    q = np.rint(np.clip(v, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def decode_pgm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if not raw.startswith(b"P5"):
        raise ImageFormatError(f"{name}: not a binary PGM (magic {raw[:2]!r})")
    m = _HEADER.match(raw)
    if m is None:
        raise ImageFormatError(f"{name}: malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{name}: only 8-bit PGM is supported (maxval {maxval})")
    payload = raw[m.end() :]
    if len(payload) != w * h:
        raise ImageFormatError(f"{name}: header declares {w}x{h}={w * h} pixels, payload has {len(payload)} bytes")
    q = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (q.astype(np.float32) / np.float32(maxval))[None]


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 PGM as a ``(1, H, W)`` float32 tensor in [0, 1]."""
    return decode_pgm(Path(path).read_bytes(), str(path))


def save_image(tensor: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_pgm(tensor))


# -- generator ------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    train_background: int = 400
    train_defect: int = 80
    test_background: int = 200
    test_defect: int = 40
    master_seed: int = 0
    # texture: difference of Gaussians of white noise
    texture_sigma_fine: float = 0.8
    texture_sigma_coarse: float = 4.0
    texture_base: float = 0.55
    texture_amplitude: float = 0.08
    # scratches
    contrast_range: tuple[float, float] = (0.3, 0.6)
    test_faintness: float = 0.0
    max_scratches: int = 3
    scratch_length: tuple[float, float] = (0.2, 0.4)
    scratch_width: int = 2
    blur_sigma: float = 0.7
    blur_radius: int = 2

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.height % 8 or self.width % 8:
            raise ValueError(f"image size must be positive multiples of 8, got {self.height}x{self.width}")
        lo, hi = self.contrast_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"contrast_range must satisfy 0 <= lo <= hi <= 1, got {self.contrast_range}")
        if not 0 <= self.test_faintness < 1:
            raise ValueError("test_faintness must lie in [0, 1)")
        if self.max_scratches < 1 or self.scratch_width < 1 or self.blur_sigma <= 0 or self.blur_radius < 0:
            raise ValueError("invalid scratch parameters")
        for name in ("train_background", "train_defect", "test_background", "test_defect"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("contrast_range", "scratch_length"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def split_counts(self) -> dict[str, tuple[int, int]]:
        return {
            "train": (self.train_background, self.train_defect),
            "test": (self.test_background, self.test_defect),
        }

    def faintness(self, split: str) -> float:
        return self.test_faintness if split == "test" else 0.0


def _texture(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    noise = rng.standard_normal((cfg.height, cfg.width))
    band = ndimage.gaussian_filter(noise, cfg.texture_sigma_fine, mode="wrap") - ndimage.gaussian_filter(
        noise, cfg.texture_sigma_coarse, mode="wrap"
    )
    band = (band - band.mean()) / (band.std() + 1e-12)
    return np.clip(cfg.texture_base + cfg.texture_amplitude * band, 0.0, 1.0)


def _polyline(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    core = np.zeros((h, w), dtype=bool)
    y, x = rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(int(rng.integers(1, 4))):
        angle += rng.normal(0, 0.5)
        length = rng.uniform(*cfg.scratch_length) * min(h, w)
        y2, x2 = y + length * np.sin(angle), x + length * np.cos(angle)
        t = np.linspace(0.0, 1.0, int(4 * length) + 2)
        ys = np.rint(y + t * (y2 - y)).astype(int)
        xs = np.rint(x + t * (x2 - x)).astype(int)
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        core[ys[keep], xs[keep]] = True
        y, x = y2, x2
    if cfg.scratch_width > 1:
        core = ndimage.binary_dilation(core, iterations=cfg.scratch_width - 1)
    return core


def _scratch_profile(core: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Blurred scratch darkness in [0, 1]; nonzero only within ``blur_radius`` of the core."""
    truncate = (cfg.blur_radius + 0.49) / cfg.blur_sigma
    blurred = ndimage.gaussian_filter(core.astype(np.float64), cfg.blur_sigma, truncate=truncate, mode="constant")
    peak = blurred[core].min() if core.any() else 1.0
    return np.clip(blurred / peak, 0.0, 1.0)


def generate_sample(
    seed: int, defect: bool, config: SynthConfig = SynthConfig(), faintness: float = 0.0
) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(image (1,H,W) float32, mask or None)``.

    The background depends only on ``seed``, so a defect sample and the
    background-only sample with the same seed differ only near the scratches.
    """
    rng = np.random.default_rng([seed, 0])
    image = _texture(rng, config)
    if not defect:
        return image.astype(np.float32)[None], None
    srng = np.random.default_rng([seed, 1])
    lo, hi = config.contrast_range
    contrast = srng.uniform(lo, hi) * (1.0 - faintness)
    mask = np.zeros_like(image, dtype=bool)
    darkness = np.zeros_like(image)
    for _ in range(int(srng.integers(1, config.max_scratches + 1))):
        core = _polyline(srng, config)
        mask |= core
        darkness = np.maximum(darkness, _scratch_profile(core, config))
    if not mask.any():
        # polyline left the frame entirely; fall back to a centred stroke
        mask[config.height // 2, config.width // 4 : 3 * config.width // 4] = True
        darkness = _scratch_profile(mask, config)
    image = np.clip(image - contrast * darkness, 0.0, 1.0)
    return image.astype(np.float32)[None], mask


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image: str
    label: int
    mask: str | None
    seed: int


@dataclass
class DatasetManifest:
    root: Path
    config: SynthConfig
    splits: dict[str, list[SampleRecord]] = field(default_factory=dict)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; manifest has {sorted(self.splits)}")
        return self.splits[name]

    def load(self, record: SampleRecord) -> np.ndarray:
        return load_image(self.root / record.image)

    def to_json(self) -> str:
        doc = {
            "config": asdict(self.config),
            "splits": {k: [asdict(r) for r in v] for k, v in self.splits.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_manifest(root: str | os.PathLike) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json" if root.is_dir() else root
    doc = json.loads(path.read_text())
    splits = {k: [SampleRecord(**r) for r in v] for k, v in doc["splits"].items()}
    return DatasetManifest(path.parent, SynthConfig.from_dict(doc["config"]), splits)


def sample_seed(master_seed: int, split: str, index: int) -> int:
    split_code = {"train": 1, "test": 2}.get(split, 3)
    return int(np.random.SeedSequence([master_seed, split_code, index]).generate_state(1)[0])


def generate_dataset(config: SynthConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc.strerror}") from exc
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset directory {root} is not writable")
    manifest = DatasetManifest(root, config)
    for split, (n_bg, n_def) in config.split_counts().items():
        if n_bg < 1 or n_def < 1:
            raise ValueError(f"split {split} needs at least one sample per class")
        labels = np.array([0] * n_bg + [1] * n_def)
        order = np.random.default_rng([config.master_seed, 7, len(split)]).permutation(labels.size)
        records = []
        for i, label in enumerate(labels[order]):
            sid = f"{split}_{i:04d}"
            seed = sample_seed(config.master_seed, split, i)
            image, mask = generate_sample(seed, bool(label), config, config.faintness(split))
            img_rel = f"{split}/images/{sid}.pgm"
            save_image(image, root / img_rel)
            mask_rel = None
            if mask is not None:
                mask_rel = f"{split}/masks/{sid}.pgm"
                save_image(mask.astype(np.float32), root / mask_rel)
            records.append(SampleRecord(sid, img_rel, int(label), mask_rel, seed))
        manifest.splits[split] = records
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest
