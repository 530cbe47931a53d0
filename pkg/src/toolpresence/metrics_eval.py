"""Precision-recall curves, per-tool AP and the mean +/- std report.

AP uses all-point interpolation: the precision at each recall level is
replaced by the best precision reached at that recall or beyond, and the
resulting step function is integrated over recall.  Frames sharing a score
enter the ranking together, which makes AP independent of input order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from toolpresence.data_ingest import NUM_TOOLS, TOOL_HEADER, TOOLS, DatasetManifest, _check_header, _read_lines
from toolpresence.errors import (
    AnnotationFormatError,
    AnnotationValueError,
    ArityError,
    ConfigurationError,
    CoverageError,
    OrderingError,
    UndefinedMetricError,
)

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray  # score at each cut, descending
    positives: int
    negatives: int

    def points(self):
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def precision_recall_curve(scores, labels) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    if np.isnan(scores).any():
        raise ValueError("NaN score")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("precision/recall undefined without positive labels")

    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order].astype(np.int64)
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last position of each run of equal scores is where that cut ends
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    return PRCurve(
        recall=tp / positives,
        precision=tp / (tp + fp),
        thresholds=s[last],
        positives=positives,
        negatives=int(labels.size - positives),
    )


def average_precision(curve: PRCurve, interpolation: str = "all_point") -> float:
    """Area under ``curve``.

    ``interpolation="trapezoid"`` integrates the raw curve with the
    trapezoid rule instead, starting from (0, first precision).
    """
    r = np.r_[0.0, curve.recall]
    if interpolation == "all_point":
        envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
        return float(np.sum(np.diff(r) * envelope))
    if interpolation == "trapezoid":
        p = np.r_[curve.precision[0], curve.precision]
        return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if v.size > 1 else float("nan")
    return mean, std


def mean_ap(per_tool_ap: Sequence[float]) -> tuple:
    """Arithmetic mean and sample (n-1) standard deviation of the 7 APs."""
    if len(per_tool_ap) != NUM_TOOLS:
        raise ArityError(f"expected {NUM_TOOLS} AP values, got {len(per_tool_ap)}")
    return _mean_std(per_tool_ap)


def round1(x: float) -> str:
    """One decimal, round-half-even on the shortest decimal repr of ``x``."""
    if x is None or math.isnan(x):
        return "n/a"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN))


@dataclass
class EvaluationReport:
    per_tool_ap: tuple  # fractions in [0, 1]; None where a tool has no positives
    mean: float
    std: float
    positives: tuple
    frames: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_aps(cls, aps, positives=None, frames=0, metadata=None) -> "EvaluationReport":
        aps = tuple(None if a is None else float(a) for a in aps)
        if len(aps) != NUM_TOOLS:
            raise ArityError(f"expected {NUM_TOOLS} AP values, got {len(aps)}")
        defined = [a for a in aps if a is not None]
        if len(defined) == NUM_TOOLS:
            mean, std = mean_ap(defined)
        elif defined:
            mean, std = _mean_std(defined)
        else:
            mean, std = float("nan"), float("nan")
        return cls(aps, mean, std, tuple(positives or (0,) * NUM_TOOLS), frames, dict(metadata or {}))


def evaluate(predictions: Mapping, truth: DatasetManifest, interpolation: str = "all_point") -> EvaluationReport:
    """Per-tool AP over all truth frames, pooled across videos.

    ``predictions`` maps ``(video_id, frame_index)`` to 7 confidences.  Tools
    without positive frames get ``None`` and are left out of the mean.
    """
    truth_keys = [r.key for r in truth.records]
    truth_set = set(truth_keys)
    missing = [k for k in truth_keys if k not in predictions]
    extra = sorted(k for k in predictions if k not in truth_set)
    if missing or extra:
        offenders = ([f"missing {v}:{f}" for v, f in missing] + [f"extra {v}:{f}" for v, f in extra])
        raise CoverageError(
            f"predictions do not cover the truth frames ({len(missing)} missing, {len(extra)} extra): "
            + ", ".join(offenders[:10]),
            offenders[:10],
        )

    scores = np.array([np.asarray(predictions[k], dtype=np.float64) for k in truth_keys])
    if scores.shape != (len(truth_keys), NUM_TOOLS):
        raise ValueError(f"expected {NUM_TOOLS} confidences per frame")
    labels = truth.tool_matrix()
    aps, positives = [], []
    for t in range(NUM_TOOLS):
        positives.append(int(labels[:, t].sum()))
        if positives[-1] == 0:
            warnings.warn(f"{TOOLS[t]} has no positive frames; AP undefined and excluded from the mean")
            aps.append(None)
            continue
        curve = precision_recall_curve(scores[:, t], labels[:, t])
        aps.append(average_precision(curve, interpolation))
    return EvaluationReport.from_aps(
        aps, positives, len(truth_keys), {"interpolation": interpolation}
    )


@dataclass(frozen=True)
class ToolPresenceDecision:
    decisions: np.ndarray  # same leading shape as the confidences, uint8
    thresholds: tuple


def apply_thresholds(confidences, thresholds=(DEFAULT_THRESHOLD,) * NUM_TOOLS) -> ToolPresenceDecision:
    """A tool is present iff its confidence is strictly above its threshold."""
    th = np.asarray(thresholds, dtype=np.float64)
    if th.shape != (NUM_TOOLS,):
        raise ConfigurationError(f"expected {NUM_TOOLS} thresholds")
    if ((th < 0) | (th > 1)).any() or np.isnan(th).any():
        raise ConfigurationError("thresholds must lie in [0, 1]")
    conf = np.asarray(confidences, dtype=np.float64)
    return ToolPresenceDecision((conf > th).astype(np.uint8), tuple(th.tolist()))


# -- rendering --------------------------------------------------------------


def render_report(report: EvaluationReport) -> str:
    """Table in canonical tool order, APs in percent, ending ``MEAN m±s``."""
    width = max(len(t) for t in TOOLS) + 2
    lines = [f"{'Tool':<{width}}AP"]
    for name, ap in zip(TOOLS, report.per_tool_ap):
        lines.append(f"{name:<{width}}{round1(None if ap is None else 100 * ap)}")
    lines.append(f"{'MEAN':<{width}}{round1(100 * report.mean)}±{round1(100 * report.std)}")
    return "\n".join(lines) + "\n"


def render_summary(report: EvaluationReport) -> str:
    """Machine-readable TSV; values are fractions printed with full precision."""
    def fmt(x):
        return "nan" if x is None or math.isnan(x) else repr(float(x))

    lines = ["tool\tap\tpositives"]
    for name, ap, pos in zip(TOOLS, report.per_tool_ap, report.positives):
        lines.append(f"{name}\t{fmt(ap)}\t{pos}")
    lines.append(f"MEAN\t{fmt(report.mean)}\t{report.frames}")
    lines.append(f"STD\t{fmt(report.std)}\t")
    return "\n".join(lines) + "\n"


# -- prediction files -------------------------------------------------------


def format_confidence(c: float) -> str:
    return f"{float(c):.6f}"


def serialize_predictions(frames: Sequence[int], confidences) -> str:
    lines = [TOOL_HEADER]
    conf = np.asarray(confidences, dtype=np.float64)
    for f, row in zip(frames, conf):
        lines.append("\t".join([str(int(f))] + [format_confidence(c) for c in row]))
    return "\n".join(lines) + "\n"


def write_prediction_file(path, frames, confidences) -> None:
    Path(path).write_bytes(serialize_predictions(frames, confidences).encode("utf-8"))


def serialize_decisions(frames, decisions) -> str:
    lines = [TOOL_HEADER]
    for f, row in zip(frames, np.asarray(decisions)):
        lines.append("\t".join([str(int(f))] + [str(int(b)) for b in row]))
    return "\n".join(lines) + "\n"


def read_prediction_file(path):
    """Return ``(frames, confidences)`` with confidences as an (M, 7) array."""
    lines = _read_lines(path)
    if not lines:
        raise AnnotationFormatError(f"{path}: empty file, missing header")
    _check_header(lines[0], TOOL_HEADER, path)
    frames, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.rstrip("\r").split("\t")
        if len(cells) != NUM_TOOLS + 1:
            raise AnnotationFormatError(f"{path}:{lineno}: expected {NUM_TOOLS + 1} columns")
        try:
            frame = int(cells[0])
            row = [float(c) for c in cells[1:]]
        except ValueError:
            raise AnnotationValueError(f"{path}:{lineno}: unparsable value") from None
        if any(not 0.0 <= c <= 1.0 for c in row):
            raise AnnotationValueError(f"{path}:{lineno}: confidence outside [0, 1]")
        if frames and frame <= frames[-1]:
            raise OrderingError(f"{path}:{lineno}: frame index {frame} does not increase")
        frames.append(frame)
        rows.append(row)
    return frames, np.array(rows, dtype=np.float64).reshape(-1, NUM_TOOLS)


def load_prediction_dir(directory) -> dict:
    """Read every ``<video_id>_pred.txt`` into a ``{(video_id, frame): conf}`` map."""
    preds = {}
    for path in sorted(Path(directory).glob("*_pred.txt")):
        vid = path.name[: -len("_pred.txt")]
        frames, conf = read_prediction_file(path)
        for f, row in zip(frames, conf):
            preds[(vid, f)] = row
    return preds


def read_ap_file(path) -> list:
    """Per-tool APs in percent, one ``<Tool>\\t<ap>`` line per tool (header optional)."""
    values = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        cells = line.split("\t")
        if len(cells) != 2 or cells[0] == "Tool":
            if lineno == 1 and cells[0] == "Tool":
                continue
            raise AnnotationFormatError(f"{path}:{lineno}: expected '<tool>\\t<ap>'")
        if cells[0] not in TOOLS:
            raise AnnotationFormatError(f"{path}:{lineno}: unknown tool {cells[0]!r}")
        values[cells[0]] = float(cells[1])
    missing = [t for t in TOOLS if t not in values]
    if missing:
        raise ArityError(f"{path}: no AP for {', '.join(missing)}")
    return [values[t] for t in TOOLS]


def parse_rendered_report(text: str) -> tuple:
    """Inverse of :func:`render_report`: ``(7 APs in percent, mean, std)``."""
    lines = text.strip("\n").split("\n")
    aps = []
    for line in lines[1:1 + NUM_TOOLS]:
        value = line.split()[-1]
        aps.append(None if value == "n/a" else float(value))
    m, s = lines[-1].split()[-1].split("±")
    return aps, float(m), float(s)


def report_from_percent(aps_percent, metadata: Optional[dict] = None) -> EvaluationReport:
    return EvaluationReport.from_aps([a / 100.0 for a in aps_percent], metadata=metadata)
