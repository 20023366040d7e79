"""Center-distance detection metrics: AP, TP errors, NDS and binned mAP.

AP follows the normalized definition: precision is read from the
precision envelope (best precision at any recall at or above r), the part
above ``min_precision`` is rescaled to [0, 1], and that curve is integrated
over recall in [min_recall, 1] with the trapezoid rule on an evenly spaced
grid, then divided by the integration length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .boxes import CLASS_NAMES, Box3D
from .errors import ContractViolation, InputError

TP_METRICS = ("ate", "ase", "aoe", "ave", "aae")
INF = float("inf")


@dataclass
class GroundTruthRecord:
    sample_id: str
    label: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    attribute: str | None = None

    def __post_init__(self):
        self.sample_id = str(self.sample_id)
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.yaw = float(self.yaw)
        if min(self.size) <= 0:
            raise ContractViolation(f"box sizes must be positive, got {self.size}")

    @classmethod
    def from_box(cls, sample_id: str, box: Box3D, **extra):
        return cls(sample_id, box.class_name, box.center, box.size, box.yaw, box.velocity, **extra)


@dataclass
class DetectionRecord(GroundTruthRecord):
    score: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ContractViolation(f"detection score {self.score} outside [0, 1]")

    @classmethod
    def from_box(cls, sample_id: str, box: Box3D, **extra):
        return super().from_box(sample_id, box, score=box.score, **extra)


@dataclass(frozen=True)
class EvalConfig:
    dist_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    min_recall: float = 0.1
    min_precision: float = 0.1
    tp_threshold: float = 2.0
    classes: tuple[str, ...] = CLASS_NAMES
    recall_samples: int = 41
    distance_bins: tuple[tuple[float, float], ...] | None = ((0.0, 20.0), (20.0, 30.0), (30.0, INF))
    size_bins: tuple[tuple[float, float], ...] | None = ((0.0, 4.0), (4.0, INF))
    # AAE contribution of a pair where exactly one side carries an attribute
    attribute_missing_error: float = 1.0

    def __post_init__(self):
        th = self.dist_thresholds
        if not th or any(t <= 0 for t in th) or any(a >= b for a, b in zip(th, th[1:])):
            raise ContractViolation(f"distance thresholds must be ascending and positive, got {th}")
        if self.recall_samples < 2:
            raise ContractViolation("recall_samples must be >= 2")


@dataclass
class MatchResult:
    tp: np.ndarray  # bool, aligned with the (sorted) predictions
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index)
    fn: int


@dataclass
class MetricsReport:
    ap: dict[str, dict[str, float]]  # class -> threshold -> AP
    mean_ap: float
    tp_errors: dict[str, dict[str, float]]  # class -> metric -> value
    mate: float
    mase: float
    maoe: float
    mave: float
    maae: float
    nds: float
    binned: dict | None = None
    classes: list[str] = field(default_factory=list)

    @property
    def tp_means(self) -> tuple[float, float, float, float, float]:
        return (self.mate, self.mase, self.maoe, self.mave, self.maae)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def table(self, method: str = "model") -> str:
        """Plain-text row in the NDS / mAP / mATE ... mAAE column layout."""
        head = ["Method", "NDS", "mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE"]
        row = [method] + [f"{v:.3f}" for v in (self.nds, self.mean_ap, *self.tp_means)]
        width = max(len(method), len("Method"))
        lines = [
            "  ".join([head[0].ljust(width)] + [h.rjust(6) for h in head[1:]]),
            "  ".join([row[0].ljust(width)] + [v.rjust(6) for v in row[1:]]),
        ]
        if self.ap:
            lines.append("")
            lines.append("Per-class AP (" + ", ".join(next(iter(self.ap.values())).keys()) + " m):")
            for name, per in self.ap.items():
                lines.append(f"  {name:<22}" + " ".join(f"{v:.3f}" for v in per.values()))
        if self.binned:
            for kind, bins in self.binned.items():
                cells = ", ".join(f"{b}: {'-' if v is None else f'{v:.3f}'}" for b, v in bins.items())
                lines.append(f"mAP by {kind}: {cells}")
        return "\n".join(lines)


def _planar_distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def sort_predictions(preds: Sequence[DetectionRecord]) -> list[int]:
    """Indices by score descending, then sample id, then input position."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].sample_id, i))


def match_by_center_distance(
    preds: Sequence[DetectionRecord],
    gts: Sequence[GroundTruthRecord],
    threshold: float,
) -> MatchResult:
    """Greedy one-to-one matching for predictions already sorted by score.

    Each prediction claims the nearest unclaimed ground truth of the same
    sample whose planar center distance is below ``threshold``.
    """
    by_sample: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        by_sample.setdefault(g.sample_id, []).append(gi)
    claimed = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(preds), dtype=bool)
    pairs = []
    for pi, p in enumerate(preds):
        best, best_d = -1, INF
        for gi in by_sample.get(p.sample_id, ()):
            if claimed[gi]:
                continue
            d = _planar_distance(p.center, gts[gi].center)
            if d < best_d:
                best, best_d = gi, d
        if best >= 0 and best_d < threshold:
            claimed[best] = True
            tp[pi] = True
            pairs.append((pi, best))
    return MatchResult(tp, pairs, int(len(gts) - claimed.sum()))


def _ap_from_flags(tp: np.ndarray, npos: int, config: EvalConfig) -> float:
    if npos == 0 or len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    precision = tps / (tps + fps)
    recall = tps / npos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(config.min_recall, 1.0, config.recall_samples)
    first = np.searchsorted(recall, grid - 1e-12, side="left")
    at = np.where(first < len(recall), envelope[np.minimum(first, len(recall) - 1)], 0.0)
    g = np.clip(at - config.min_precision, 0.0, None) / (1.0 - config.min_precision)
    weights = np.ones(config.recall_samples)
    weights[[0, -1]] = 0.5
    return float((weights * g).sum() / (config.recall_samples - 1))


def average_precision(
    preds: Sequence[DetectionRecord],
    gts: Sequence[GroundTruthRecord],
    threshold: float,
    config: EvalConfig = EvalConfig(),
) -> float:
    """Normalized AP for one class at one distance threshold."""
    order = sort_predictions(preds)
    result = match_by_center_distance([preds[i] for i in order], gts, threshold)
    return _ap_from_flags(result.tp, len(gts), config)


def _yaw_gap(a: float, b: float) -> float:
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def _scale_iou(sa, sb) -> float:
    inter = float(np.prod(np.minimum(sa, sb)))
    return inter / (float(np.prod(sa)) + float(np.prod(sb)) - inter)


def tp_errors(
    pairs: Sequence[tuple[DetectionRecord, GroundTruthRecord]],
    attribute_missing_error: float = 1.0,
) -> dict[str, float]:
    """Mean translation, scale, orientation, velocity and attribute errors.

    An empty pair list yields 1.0 for every error.
    """
    if not pairs:
        return {k: 1.0 for k in TP_METRICS}
    ate, ase, aoe, ave, aae = [], [], [], [], []
    for p, g in pairs:
        ate.append(_planar_distance(p.center, g.center))
        ase.append(1.0 - _scale_iou(p.size, g.size))
        aoe.append(_yaw_gap(p.yaw, g.yaw))
        ave.append(math.hypot(p.velocity[0] - g.velocity[0], p.velocity[1] - g.velocity[1]))
        if p.attribute is None and g.attribute is None:
            aae.append(0.0)
        elif p.attribute is None or g.attribute is None:
            aae.append(attribute_missing_error)
        else:
            aae.append(0.0 if p.attribute == g.attribute else 1.0)
    return {k: float(np.mean(v)) for k, v in zip(TP_METRICS, (ate, ase, aoe, ave, aae))}


def nds(mean_ap: float, tp_means: Sequence[float]) -> float:
    """(5 mAP + sum over the five TP errors of (1 - min(1, e))) / 10."""
    if len(tp_means) != 5:
        raise ContractViolation("nds needs exactly five TP error means")
    if not 0.0 <= mean_ap <= 1.0 or any(e < 0 for e in tp_means):
        raise ContractViolation("nds needs mAP in [0, 1] and non-negative errors")
    return (5.0 * mean_ap + sum(1.0 - min(1.0, e) for e in tp_means)) / 10.0


def _bin_label(lo: float, hi: float) -> str:
    def fmt(v):
        return "inf" if math.isinf(v) else f"{v:g}"

    return f"[{fmt(lo)},{fmt(hi)})"


def _distance_key(rec) -> float:
    return math.hypot(rec.center[0], rec.center[1])


def _size_key(rec) -> float:
    return max(rec.size)


def _group(records, label):
    return [r for r in records if r.label == label]


def binned_map(
    preds: Sequence[DetectionRecord],
    gts: Sequence[GroundTruthRecord],
    config: EvalConfig = EvalConfig(),
) -> dict[str, dict[str, float | None]]:
    """mAP per distance bin and per size bin.

    Ground truths fall in the bin of their own center distance (or longest
    edge).  A prediction joins the bin of the ground truth it matched at the
    current threshold, or the bin of its own box when unmatched.
    """
    out = {}
    for kind, bins, key in (("distance", config.distance_bins, _distance_key), ("size", config.size_bins, _size_key)):
        if not bins:
            continue
        sums = {b: [] for b in bins}
        for name in config.classes:
            cls_gts = _group(gts, name)
            if not cls_gts:
                continue
            cls_preds = _group(preds, name)
            order = sort_predictions(cls_preds)
            ranked = [cls_preds[i] for i in order]
            for th in config.dist_thresholds:
                match = match_by_center_distance(ranked, cls_gts, th)
                owner = {pi: gi for pi, gi in match.pairs}
                pred_key = np.array(
                    [key(cls_gts[owner[pi]]) if pi in owner else key(p) for pi, p in enumerate(ranked)]
                )
                gt_key = np.array([key(g) for g in cls_gts])
                for lo, hi in bins:
                    npos = int(((gt_key >= lo) & (gt_key < hi)).sum())
                    if npos == 0:
                        continue
                    sel = (pred_key >= lo) & (pred_key < hi)
                    sums[(lo, hi)].append(_ap_from_flags(match.tp[sel], npos, config))
        out[kind] = {_bin_label(*b): (float(np.mean(v)) if v else None) for b, v in sums.items()}
    return out


def evaluate(
    preds: Sequence[DetectionRecord],
    gts: Sequence[GroundTruthRecord],
    config: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """AP per class and threshold, TP errors at ``tp_threshold`` and NDS.

    Classes without any ground truth are left out of every mean.
    """
    known = set(config.classes)
    unknown = sorted({r.label for r in preds if r.label not in known})
    if unknown:
        raise InputError(f"unknown class label(s) in predictions: {', '.join(unknown)}")
    unknown = sorted({r.label for r in gts if r.label not in known})
    if unknown:
        raise InputError(f"unknown class label(s) in ground truth: {', '.join(unknown)}")

    present = [c for c in config.classes if any(g.label == c for g in gts)]
    ap: dict[str, dict[str, float]] = {}
    errors: dict[str, dict[str, float]] = {}
    for name in present:
        cls_gts = _group(gts, name)
        cls_preds = _group(preds, name)
        ranked = [cls_preds[i] for i in sort_predictions(cls_preds)]
        ap[name] = {
            f"{th:g}": _ap_from_flags(match_by_center_distance(ranked, cls_gts, th).tp, len(cls_gts), config)
            for th in config.dist_thresholds
        }
        match = match_by_center_distance(ranked, cls_gts, config.tp_threshold)
        pairs = [(ranked[pi], cls_gts[gi]) for pi, gi in match.pairs]
        errors[name] = tp_errors(pairs, config.attribute_missing_error)

    if present:
        mean_ap = float(np.mean([v for per in ap.values() for v in per.values()]))
        means = [float(np.mean([errors[c][k] for c in present])) for k in TP_METRICS]
    else:
        mean_ap, means = 0.0, [1.0] * 5
    binned = binned_map(preds, gts, config) if (config.distance_bins or config.size_bins) else None
    return MetricsReport(
        ap=ap,
        mean_ap=mean_ap,
        tp_errors=errors,
        mate=means[0],
        mase=means[1],
        maoe=means[2],
        mave=means[3],
        maae=means[4],
        nds=nds(mean_ap, means),
        binned=binned,
        classes=present,
    )
