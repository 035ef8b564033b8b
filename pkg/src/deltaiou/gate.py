"""Heatmap binarisation, the delta-IoU suspicion score, gating and metrics.

Only negative predictions are ever gated. A sample whose verdict is
``suspicious`` is taken out of the automated decision: it is excluded from the
retained confusion counts and tallied separately by its ground truth.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from deltaiou.model import NEGATIVE, POSITIVE, Prediction
from deltaiou.ops import ShapeError

BINS = 256

ACCEPTED_NEGATIVE = "accepted-negative"
ACCEPTED_POSITIVE = "accepted-positive"
SUSPICIOUS = "suspicious"


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m))


def histogram_levels(values: np.ndarray) -> np.ndarray:
    """Quantised level ``ceil(256 v)`` of every value in [0, 1].

    Level 0 holds exact zeros and level ``i >= 1`` holds ``((i-1)/256, i/256]``,
    so ``value > k/256`` exactly when ``level > k``.
    """
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.ceil(v * BINS).astype(np.int64), 0, BINS)


def otsu_threshold(heatmap) -> float:
    """Candidate threshold ``k/256`` (k = 0..255) maximising between-class variance.

    Scores are compared exactly with integer arithmetic, so ties are genuine
    and resolve to the lowest ``k``. A map with no usable split returns 1.0.
    """
    levels = histogram_levels(_values(heatmap)).ravel()
    counts = np.bincount(levels, minlength=BINS + 1).tolist()
    n = sum(counts)
    total = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for k in range(BINS):
        # lower class = levels <= k
        n0 += counts[k]
        s0 += k * counts[k]
        n1, s1 = n - n0, total - s0
        if n0 == 0 or n1 == 0:
            continue
        # w0*w1*(mu1-mu0)^2 is proportional to (n0*s1 - n1*s0)^2 / (n0*n1)
        num = (n0 * s1 - n1 * s0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    if best_k is None or best_num == 0:
        return 1.0
    return best_k / BINS


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray
    threshold: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def binarize(heatmap, threshold: float) -> BinaryMask:
    return BinaryMask(_values(heatmap) > threshold, float(threshold))


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as identical (1.0)."""
    a, b = _values(a).astype(bool), _values(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou: mask extents differ, {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass(frozen=True)
class SuspicionScore:
    iou_pos: float
    iou_neg: float

    @property
    def delta(self) -> float:
        return self.iou_pos - self.iou_neg


def delta_iou(ed_c1, ed_c0, en) -> SuspicionScore:
    return SuspicionScore(iou_pos=iou(ed_c1, en), iou_neg=iou(ed_c0, en))


@dataclass(frozen=True)
class GateDecision:
    sample_id: str
    label: int
    confidence: float
    delta: float
    verdict: str


def gate_decision(pred: Prediction, score: SuspicionScore, beta: float = 0.2, sample_id: str = "") -> GateDecision:
    if pred.label == POSITIVE:
        verdict = ACCEPTED_POSITIVE
    elif score.delta > beta:
        verdict = SUSPICIOUS
    else:
        verdict = ACCEPTED_NEGATIVE
    return GateDecision(sample_id, pred.label, pred.confidence, score.delta, verdict)


def confidence_baseline(pred: Prediction, tau: float = 0.95, sample_id: str = "", delta: float = float("nan")) -> GateDecision:
    """Flag negative predictions whose softmax confidence is below ``tau``."""
    if pred.label == POSITIVE:
        verdict = ACCEPTED_POSITIVE
    elif pred.confidence < tau:
        verdict = SUSPICIOUS
    else:
        verdict = ACCEPTED_NEGATIVE
    return GateDecision(sample_id, pred.label, pred.confidence, delta, verdict)


def ungated(pred: Prediction, sample_id: str = "") -> GateDecision:
    verdict = ACCEPTED_POSITIVE if pred.label == POSITIVE else ACCEPTED_NEGATIVE
    return GateDecision(sample_id, pred.label, pred.confidence, float("nan"), verdict)


@dataclass
class MetricsReport:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    flagged_tn: int = 0
    flagged_fn: int = 0
    flagged_other: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def retained(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def flagged(self) -> int:
        return self.flagged_tn + self.flagged_fn + self.flagged_other

    @property
    def total(self) -> int:
        return self.retained + self.flagged

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.retained if self.retained else None

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(retained=self.retained, flagged=self.flagged, total=self.total, recall=self.recall, accuracy=self.accuracy)
        d.update(extra)
        return d


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}"


def evaluate(decisions, labels) -> MetricsReport:
    decisions, labels = list(decisions), list(labels)
    if len(decisions) != len(labels):
        raise ValueError(f"{len(decisions)} decisions but {len(labels)} labels")
    r = MetricsReport()
    for d, y in zip(decisions, labels):
        if y not in (NEGATIVE, POSITIVE):
            raise ValueError(f"label must be 0 or 1, got {y!r}")
        if d.verdict == SUSPICIOUS:
            if d.label == NEGATIVE and y == NEGATIVE:
                r.flagged_tn += 1
            elif d.label == NEGATIVE:
                r.flagged_fn += 1
            else:
                r.flagged_other += 1
        elif d.label == POSITIVE:
            if y == POSITIVE:
                r.tp += 1
            else:
                r.fp += 1
        elif y == NEGATIVE:
            r.tn += 1
        else:
            r.fn += 1
    return r


def report_from_counts(tp: int, fp: int, tn: int, fn: int, flagged_tn: int = 0, flagged_fn: int = 0) -> MetricsReport:
    """Report for ungated counts with some negatives moved to the flagged tallies."""
    if flagged_tn > tn or flagged_fn > fn:
        raise ValueError("cannot flag more negatives than exist")
    return MetricsReport(tp=tp, fp=fp, tn=tn - flagged_tn, fn=fn - flagged_fn, flagged_tn=flagged_tn, flagged_fn=flagged_fn)


TABLE_COLUMNS = ("method", "TN", "FN", "Recall", "Acc(%)", "flagged_TN", "flagged_FN")


def table_row(method: str, report: MetricsReport) -> dict:
    return {
        "method": method,
        "TN": report.tn,
        "FN": report.fn,
        "Recall": _pct(report.recall),
        "Acc(%)": _pct(report.accuracy),
        "flagged_TN": report.flagged_tn,
        "flagged_FN": report.flagged_fn,
    }


def format_table(rows: list[dict], columns=TABLE_COLUMNS) -> str:
    cols = list(columns)
    widths = [max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(w) for c, w in zip(cols, widths)))
    return "\n".join(lines) + "\n"


def report_json(reports: dict[str, MetricsReport], config: dict) -> str:
    doc = {"config": config, "methods": {k: v.to_dict() for k, v in reports.items()}}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


SCORE_COLUMNS = (
    "sample_id",
    "label",
    "prediction",
    "confidence",
    "iou_pos",
    "iou_neg",
    "delta",
    "verdict",
    "confidence_verdict",
    "enhanced_prediction",
    "enhanced",
    "beta",
    "tau",
    "alpha",
    "iters",
    "layer",
)


def scores_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SCORE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
