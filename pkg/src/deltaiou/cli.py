"""Command line: ``deltaiou {synth,train,score,report}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
data or model errors. Every command stages its outputs in a scratch directory
next to the destination and moves them into place only once complete.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from deltaiou.gate import (
    ACCEPTED_NEGATIVE,
    ACCEPTED_POSITIVE,
    SCORE_COLUMNS,
    GateDecision,
    evaluate,
    format_table,
    report_json,
    scores_csv,
    table_row,
)
from deltaiou.model import NEGATIVE, POSITIVE, WeightFileError, build_tiny_vgg, load_weights, save_weights
from deltaiou.pipeline import ScoreConfig, score_image
from deltaiou.synth import ImageFormatError, SynthConfig, encode_pgm, generate_dataset, load_manifest
from deltaiou.trainer import TrainConfig, train_on_manifest

log = logging.getLogger("deltaiou")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# files whose presence marks a directory as a previous output of this tool
_MARKERS = ("manifest.json", "report.json", "scores.csv")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config ---------------------------------------------------------------------------


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def _section(doc: dict, name: str, cls) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(sec) - known)
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {', '.join(unknown)}")
    return dict(sec)


def _build(cls, values: dict, what: str):
    try:
        return cls.from_dict(values) if hasattr(cls, "from_dict") else cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} settings: {exc}") from exc


# -- staged output --------------------------------------------------------------------


@contextlib.contextmanager
def _staged(dest: str | os.PathLike):
    """Yield a scratch directory that replaces ``dest`` only if the block succeeds."""
    dest = Path(dest)
    if dest.exists():
        if not dest.is_dir():
            raise UsageError(f"output path {dest} exists and is not a directory")
        if any(dest.iterdir()) and not any((dest / m).exists() for m in _MARKERS):
            raise UsageError(f"refusing to overwrite non-empty directory {dest}")
    try:
        dest.parent.mkdir(parents=True, exist_ok=True)
        scratch = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    except OSError as exc:
        raise DataError(f"cannot write to {dest}: {exc.strerror}") from exc
    try:
        yield scratch
        if dest.exists():
            shutil.rmtree(dest)
        scratch.rename(dest)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch, ignore_errors=True)


# -- commands ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _read_config(args.config)
    values = _section(doc, "synth", SynthConfig)
    if args.seed is not None:
        values["master_seed"] = args.seed
    config = _build(SynthConfig, values, "synth")
    with _staged(args.out) as tmp:
        manifest = generate_dataset(config, tmp)
    n = sum(len(v) for v in manifest.splits.values())
    print(f"wrote {n} samples to {args.out}")
    return EXIT_OK


def _load_data(path):
    try:
        return load_manifest(path)
    except FileNotFoundError as exc:
        raise DataError(f"no dataset manifest at {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"unreadable dataset manifest at {path}: {exc}") from exc


def cmd_train(args) -> int:
    doc = _read_config(args.config)
    values = _section(doc, "train", TrainConfig)
    for key in ("seed", "epochs"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.learning_rate is not None:
        values["learning_rate"] = args.learning_rate
    config = _build(TrainConfig, values, "train")
    manifest = _load_data(args.data)
    model = build_tiny_vgg(manifest.config.height, manifest.config.width, seed=config.seed)
    with _staged(args.out) as tmp:
        trained, history = train_on_manifest(model, manifest, config)
        save_weights(trained, tmp)
        (tmp / "history.csv").write_text(history.to_csv())
    print(f"final train accuracy {history.accuracy[-1]:.3f}; weights in {args.out}")
    return EXIT_OK


def _fmt(v) -> str:
    return f"{v:.6f}"


def _score_rows(model, manifest, record, config: ScoreConfig, want_maps: bool):
    image = manifest.load(record)
    runs = [False, True] if config.enhance else [False]
    rows, panels = [], []
    for enhanced in runs:
        cfg = ScoreConfig(**{**asdict(config), "enhance": enhanced})
        s = score_image(model, image, cfg, record.sample_id)
        rows.append(
            {
                "sample_id": record.sample_id,
                "label": record.label,
                "prediction": s.prediction.label,
                "confidence": _fmt(s.prediction.confidence),
                "iou_pos": _fmt(s.score.iou_pos),
                "iou_neg": _fmt(s.score.iou_neg),
                "delta": _fmt(s.score.delta),
                "verdict": s.decision.verdict,
                "confidence_verdict": s.baseline.verdict,
                "enhanced_prediction": s.explained_prediction.label,
                "enhanced": int(enhanced),
                "beta": config.beta,
                "tau": config.tau,
                "alpha": config.alpha,
                "iters": config.iters,
                "layer": "" if config.layer is None else config.layer,
            }
        )
        if want_maps:
            suffix = "_adv" if enhanced else ""
            panel = np.concatenate(
                [s.explained_image.reshape(model.input_shape[1:])]
                + [s.heatmaps[k].values for k in ("gradcam_c0", "gradcam_c1", "fullgrad")],
                axis=1,
            )
            panels.append((f"{record.sample_id}{suffix}.pgm", encode_pgm(panel)))
    return rows, panels


def cmd_score(args) -> int:
    doc = _read_config(args.config)
    values = _section(doc, "score", ScoreConfig)
    for key in ("beta", "tau", "alpha", "iters", "layer"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.enhance:
        values["enhance"] = True
    config = _build(ScoreConfig, values, "score")
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    try:
        model = load_weights(args.weights)
    except WeightFileError as exc:
        raise DataError(str(exc)) from exc
    manifest = _load_data(args.data)
    try:
        records = sorted(manifest.split(args.split), key=lambda r: r.sample_id)
    except KeyError as exc:
        raise DataError(exc.args[0]) from exc
    if not records:
        raise DataError(f"no samples in split {args.split!r} of {args.data}")
    if config.layer is not None and not 0 <= config.layer < len(model.layers):
        raise UsageError(f"--layer {config.layer} is outside the model's {len(model.layers)} layers")

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        # map() yields in submission order, so output order never depends on scheduling
        results = list(pool.map(lambda r: _score_rows(model, manifest, r, config, args.emit_heatmaps), records))
    rows = [row for rs, _ in results for row in rs]
    reports = reports_from_rows(rows)
    echo = asdict(config)
    echo.update(weights=str(args.weights), data=str(args.data), split=args.split)

    with _staged(args.out) as tmp:
        (tmp / "scores.csv").write_text(scores_csv(rows))
        (tmp / "report.json").write_text(report_json(reports, echo))
        (tmp / "report.txt").write_text(format_table([table_row(k, v) for k, v in reports.items()]))
        if args.emit_heatmaps:
            (tmp / "heatmaps").mkdir()
            for _, panels in results:
                for name, data in panels:
                    (tmp / "heatmaps" / name).write_bytes(data)
    sys.stdout.write(format_table([table_row(k, v) for k, v in reports.items()]))
    return EXIT_OK


# -- report ---------------------------------------------------------------------------------


def _decisions(rows, column: str) -> list[GateDecision]:
    return [GateDecision(r["sample_id"], int(r["prediction"]), float(r["confidence"]), float(r["delta"]), r[column]) for r in rows]


def reports_from_rows(rows: list[dict]) -> dict:
    """Origin, Confidence, ΔIoU and (if present) ΔIoU_adv reports for one scoring run."""
    plain = [r for r in rows if int(r["enhanced"]) == 0]
    adv = [r for r in rows if int(r["enhanced"]) == 1]
    labels = [int(r["label"]) for r in plain]
    origin = [
        GateDecision(r["sample_id"], int(r["prediction"]), float(r["confidence"]), float("nan"), _accepted(r))
        for r in plain
    ]
    reports = {
        "Origin": evaluate(origin, labels),
        "Confidence": evaluate(_decisions(plain, "confidence_verdict"), labels),
        "ΔIoU": evaluate(_decisions(plain, "verdict"), labels),
    }
    if adv:
        rep = evaluate(_decisions(adv, "verdict"), [int(r["label"]) for r in adv])
        # how many escaped defects the enhanced image alone would already have caught
        rep.extra["fn_converted_by_enhancement"] = sum(
            1 for r in adv if int(r["label"]) == POSITIVE and int(r["prediction"]) == NEGATIVE and int(r["enhanced_prediction"]) == POSITIVE
        )
        reports["ΔIoU_adv"] = rep
    return reports


def _accepted(row) -> str:
    return ACCEPTED_POSITIVE if int(row["prediction"]) == POSITIVE else ACCEPTED_NEGATIVE


CONFIG_COLUMNS = ("beta", "tau", "alpha", "iters", "layer")


def _read_scores(path: str) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in SCORE_COLUMNS if c not in header]
            if missing:
                raise DataError(f"{path}: missing column {missing[0]!r}")
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if not rows:
        raise DataError(f"{path}: no samples")
    return rows


def cmd_report(args) -> int:
    table = []
    for path in args.scores:
        rows = _read_scores(path)
        try:
            reports = reports_from_rows(rows)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        echo = {c: rows[0][c] for c in CONFIG_COLUMNS}
        for name, rep in reports.items():
            row = table_row(name, rep)
            row.update(source=path, **echo)
            table.append(row)
    columns = ("source", "method", "TN", "FN", "Recall", "Acc(%)", "flagged_TN", "flagged_FN") + CONFIG_COLUMNS
    text = format_table(table, columns)
    if args.out:
        out = Path(args.out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            tmp = out.with_name(f".{out.name}.tmp")
            tmp.write_text(text)
            tmp.replace(out)
        except OSError as exc:
            raise DataError(f"cannot write {out}: {exc.strerror}") from exc
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deltaiou", description="Flag suspicious negative predictions of a defect classifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--config", help="JSON config file (section 'synth')")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--seed", type=int, help="master seed")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train TinyVGG on a dataset's train split")
    t.add_argument("--config", help="JSON config file (section 'train')")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="weights directory")
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed")
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", help="score a split and write per-sample CSV plus a report")
    c.add_argument("--config", help="JSON config file (section 'score')")
    c.add_argument("--weights", required=True, help="weights directory")
    c.add_argument("--data", required=True, help="dataset directory")
    c.add_argument("--split", default="test")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--beta", type=float, help="delta-IoU gate threshold (default 0.2)")
    c.add_argument("--tau", type=float, help="confidence baseline threshold (default 0.95)")
    c.add_argument("--alpha", type=float, help="enhancement step size (default 0.01)")
    c.add_argument("--iters", type=int, help="enhancement iterations (default 2)")
    c.add_argument("--enhance", action="store_true", help="also score adversarially enhanced inputs")
    c.add_argument("--emit-heatmaps", action="store_true", help="write four-panel PGMs per sample")
    c.add_argument("--layer", type=int, help="Grad-CAM layer index (default: last conv activation)")
    c.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    c.set_defaults(func=cmd_score)

    r = sub.add_parser("report", help="merge score CSVs into one comparison table")
    r.add_argument("scores", nargs="+", help="scores.csv files")
    r.add_argument("--out", help="also write the table to this file")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"deltaiou: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WeightFileError, ImageFormatError, OSError, ValueError) as exc:
        print(f"deltaiou: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
