import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from deltaiou.synth import (
    ImageFormatError,
    SynthConfig,
    decode_pgm,
    encode_pgm,
    generate_dataset,
    generate_sample,
    load_image,
    load_manifest,
    save_image,
)

SMALL = SynthConfig(height=32, width=32, train_background=4, train_defect=2, test_background=3, test_defect=2)


# -- PGM ---------------------------------------------------------------------------


def test_pgm_round_trip_within_quantisation(tmp_path):
    x = np.random.default_rng(0).random((1, 8, 16)).astype(np.float32)
    save_image(x, tmp_path / "a.pgm")
    y = load_image(tmp_path / "a.pgm")
    assert y.shape == (1, 8, 16) and y.dtype == np.float32
    assert np.abs(y - x).max() <= 0.5 / 255 + 1e-7


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_load_save_load_fixed_point(q):
    once = decode_pgm(encode_pgm(q / 255.0))
    assert decode_pgm(encode_pgm(once)).tobytes() == once.tobytes()
    np.testing.assert_array_equal(np.rint(once[0] * 255), q)


def test_black_and_white_extremes(tmp_path):
    save_image(np.zeros((4, 5)), tmp_path / "k.pgm")
    save_image(np.ones((4, 5)), tmp_path / "w.pgm")
    assert (load_image(tmp_path / "k.pgm") == 0).all()
    assert (load_image(tmp_path / "w.pgm") == 1).all()


def test_header_with_comment():
    raw = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
    np.testing.assert_array_equal(decode_pgm(raw), [[[0.0, 1.0]]])


@pytest.mark.parametrize(
    "raw,match",
    [
        (b"P2\n2 1\n255\n\x00\x00", "not a binary PGM"),
        (b"P5\n2 x\n255\n\x00\x00", "malformed"),
        (b"P5\n2 2\n255\n\x00\x00", "payload has 2 bytes"),
        (b"P5\n2 1\n65535\n\x00\x00\x00\x00", "8-bit"),
    ],
)
def test_pgm_errors(raw, match):
    with pytest.raises(ImageFormatError, match=match):
        decode_pgm(raw)


# -- samples -----------------------------------------------------------------------


def test_sample_determinism():
    a, ma = generate_sample(11, True, SMALL)
    b, mb = generate_sample(11, True, SMALL)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(ma, mb)


def test_background_sample():
    img, mask = generate_sample(3, False, SMALL)
    assert mask is None
    assert img.shape == (1, 32, 32) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1


def test_scratches_are_darker():
    cfg = SynthConfig(contrast_range=(0.5, 0.5))
    for seed in range(20):
        img, mask = generate_sample(seed, True, cfg)
        assert mask.any()
        assert img[0][mask].mean() < img[0][~mask].mean() - 0.2


def test_defect_differs_from_background_only_near_mask():
    cfg = SynthConfig()
    for seed in range(20):
        clean, _ = generate_sample(seed, False, cfg)
        dirty, mask = generate_sample(seed, True, cfg)
        changed = clean[0] != dirty[0]
        near = ndimage.binary_dilation(mask, iterations=cfg.blur_radius, structure=np.ones((3, 3)))
        assert changed.any()
        assert not (changed & ~near).any()


def test_faintness_lowers_contrast_monotonically():
    cfg = SynthConfig()
    contrast = []
    for f in (0.0, 0.25, 0.5, 0.75):
        gaps = []
        for seed in range(15):
            clean, _ = generate_sample(seed, False, cfg)
            dirty, mask = generate_sample(seed, True, cfg, faintness=f)
            gaps.append((clean[0][mask] - dirty[0][mask]).mean())
        contrast.append(np.mean(gaps))
    assert all(a > b for a, b in zip(contrast, contrast[1:]))


@pytest.mark.parametrize(
    "kw",
    [{"height": 30}, {"width": 0}, {"contrast_range": (0.6, 0.3)}, {"test_faintness": 1.0}, {"max_scratches": 0}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


# -- datasets ------------------------------------------------------------------------


def test_default_dataset_counts(tmp_path):
    m = generate_dataset(SynthConfig(), tmp_path)
    assert sum(len(v) for v in m.splits.values()) == 720
    for split, (bg, df) in {"train": (400, 80), "test": (200, 40)}.items():
        labels = [r.label for r in m.split(split)]
        assert labels.count(0) == bg and labels.count(1) == df
    ids = [r.sample_id for v in m.splits.values() for r in v]
    assert len(set(ids)) == len(ids)
    assert all((r.mask is None) == (r.label == 0) for v in m.splits.values() for r in v)
    assert len(list(tmp_path.glob("*/images/*.pgm"))) == 720
    assert len(list(tmp_path.glob("*/masks/*.pgm"))) == 120


def test_dataset_tree_is_byte_identical(tmp_path):
    generate_dataset(SMALL, tmp_path / "a")
    generate_dataset(SMALL, tmp_path / "b")
    files = sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(str(p.relative_to(tmp_path / "b")) for p in (tmp_path / "b").rglob("*") if p.is_file())
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors


def test_manifest_round_trip(tmp_path):
    m = generate_dataset(SMALL, tmp_path)
    loaded = load_manifest(tmp_path)
    assert loaded.config == SMALL
    assert loaded.splits == m.splits
    rec = loaded.split("test")[0]
    assert loaded.load(rec).shape == (1, 32, 32)
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["master_seed"] == 0
    with pytest.raises(KeyError, match="unknown split"):
        loaded.split("val")


def test_faintness_applies_to_test_split_only(tmp_path):
    cfg = SynthConfig(**{**SMALL.__dict__, "test_faintness": 0.5})
    faint = generate_dataset(cfg, tmp_path / "f")
    plain = generate_dataset(SMALL, tmp_path / "p")
    for a, b in zip(faint.split("train"), plain.split("train")):
        assert faint.load(a).tobytes() == plain.load(b).tobytes()
    assert any(
        faint.load(a).tobytes() != plain.load(b).tobytes() for a, b in zip(faint.split("test"), plain.split("test"))
    )


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        generate_dataset(SMALL, blocker / "sub")


def test_empty_class_rejected(tmp_path):
    with pytest.raises(ValueError, match="at least one sample per class"):
        generate_dataset(SynthConfig(**{**SMALL.__dict__, "test_defect": 0}), tmp_path)
