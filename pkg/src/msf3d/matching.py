"""Bipartite matching between predictions and ground truth, and the set loss.

The matching cost of ground truth i against prediction j is exactly the
amount that assigning the pair adds to the set loss (up to the shared 1/M
factor), so the Hungarian optimum is also the loss-minimizing assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import REG_DIM, Box3D, encode_box
from .errors import ContractViolation, InputError
from .head import LayerOutput


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 2.0
    w_box: float = 0.25

    def __post_init__(self):
        if self.w_cls < 0 or self.w_box < 0 or (self.w_cls == 0 and self.w_box == 0):
            raise ContractViolation("cost weights must be >= 0 and not both zero")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha < 1 or self.gamma < 0:
            raise ContractViolation("focal loss needs alpha in (0, 1) and gamma >= 0")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index), sorted by gt
    total: float = 0.0

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class LossBreakdown:
    total: Tensor
    per_layer: list[tuple[float, float]]  # (cls, box) per layer, unweighted
    assignments: list[Assignment] = field(default_factory=list)


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every row to a distinct column (rows <= columns).

    Shortest augmenting paths with row/column potentials, O(M^2 N).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractViolation(f"cost must be a matrix, got shape {c.shape}")
    m, n = c.shape
    if m > n:
        raise ContractViolation(f"more rows ({m}) than columns ({n})")
    if not np.all(np.isfinite(c)):
        raise InputError("cost matrix contains non-finite entries")
    if m == 0:
        return Assignment([], 0.0)

    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # column -> matched row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            tree = np.nonzero(used)[0]
            u[owner[tree]] += delta
            v[tree] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    col_of_row = np.zeros(m, dtype=np.int64)
    for j in range(1, n + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    total = 0.0
    for i in range(m):
        total += float(c[i, col_of_row[i]])
    return Assignment([(int(col_of_row[i]), i) for i in range(m)], total)


def _focal_terms(logits: np.ndarray, alpha: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise positive and negative focal terms (numpy)."""
    p = ad.stable_sigmoid(logits)
    log_p = -np.logaddexp(0.0, -logits)
    log_1mp = -np.logaddexp(0.0, logits)
    pos = -alpha * (1 - p) ** gamma * log_p
    neg = -(1 - alpha) * p**gamma * log_1mp
    return pos, neg


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Per-class binary focal loss, summed and divided by max(#real targets, 1).

    ``targets[j]`` is a class id, or -1 for a no-object slot.
    """
    FocalParams(alpha, gamma)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ContractViolation(f"need one target per row, got {targets.shape} for {n} rows")
    onehot = np.zeros((n, k))
    real = targets >= 0
    onehot[np.nonzero(real)[0], targets[real]] = 1.0
    p = ad.sigmoid(logits)
    q = ad.sigmoid(ad.neg(logits))  # 1 - p without cancellation
    pos = ad.mul(ad.mul(ad.pow_(q, gamma), ad.log_sigmoid(logits)), -alpha)
    neg = ad.mul(ad.mul(ad.pow_(p, gamma), ad.log_sigmoid(ad.neg(logits))), -(1 - alpha))
    terms = ad.add(ad.mul(pos, Tensor(onehot)), ad.mul(neg, Tensor(1.0 - onehot)))
    return ad.mul(ad.sum_(terms), 1.0 / max(int(real.sum()), 1))


def encode_prediction(raw: Tensor) -> Tensor:
    """Map raw (n, 10) regression to the target encoding (sigmoid on the center)."""
    return ad.concat([ad.sigmoid(raw[:, 0:3]), raw[:, 3:REG_DIM]], axis=1)


def l1_box_loss(pred_raw: Tensor, gt: Box3D, lo: np.ndarray, hi: np.ndarray) -> Tensor:
    """Mean absolute difference over the 10 encoded components."""
    raw = pred_raw.reshape(1, REG_DIM) if pred_raw.ndim == 1 else pred_raw
    target = encode_box(gt, lo, hi)[None, :]
    return ad.mean(ad.abs_(ad.sub(encode_prediction(raw), Tensor(target))))


def pairwise_cost(
    layer: LayerOutput,
    gts: Sequence[Box3D],
    weights: CostWeights = CostWeights(),
    focal: FocalParams = FocalParams(),
) -> np.ndarray:
    """(M, N) cost; rows are ground truths, columns predictions."""
    n = layer.raw_boxes.shape[0]
    if not gts:
        return np.zeros((0, n))
    lo, hi = layer.bounds.lo, layer.bounds.hi
    targets = np.stack([encode_box(g, lo, hi) for g in gts])
    labels = np.array([g.label for g in gts])
    raw = layer.raw_boxes.data
    pred = np.concatenate([ad.stable_sigmoid(raw[:, :3]), raw[:, 3:]], axis=1)
    box = np.abs(targets[:, None, :] - pred[None, :, :]).mean(axis=2)
    pos, neg = _focal_terms(layer.class_logits.data, focal.alpha, focal.gamma)
    cls = (pos - neg)[:, labels].T
    return weights.w_cls * cls + weights.w_box * box


def set_loss(
    layers: Sequence[LayerOutput],
    gts: Sequence[Box3D],
    weights: CostWeights = CostWeights(),
    focal: FocalParams = FocalParams(),
    assignments: Sequence[Assignment] | None = None,
) -> LossBreakdown:
    """Sum over layers of w_cls * focal + w_box * matched-pair L1.

    Matching is a constant of the step; pass ``assignments`` to pin it (one
    per layer) instead of solving it from the current predictions.
    """
    if not layers:
        raise ContractViolation("set_loss needs at least one layer")
    if assignments is not None and len(assignments) != len(layers):
        raise ContractViolation("need one pinned assignment per layer")
    total = None
    per_layer = []
    chosen = []
    for li, layer in enumerate(layers):
        if assignments is None:
            assign = hungarian(pairwise_cost(layer, gts, weights, focal))
        else:
            assign = assignments[li]
            n_pred = layer.raw_boxes.shape[0]
            if any(not (0 <= p < n_pred and 0 <= g < len(gts)) for p, g in assign.pairs):
                raise ContractViolation(f"pinned assignment for layer {li} indexes outside the instance")
        chosen.append(assign)
        n = layer.raw_boxes.shape[0]
        targets = np.full(n, -1, dtype=np.int64)
        for pred, gt in assign.pairs:
            targets[pred] = gts[gt].label
        cls = focal_loss(layer.class_logits, targets, focal.alpha, focal.gamma)
        if assign.pairs:
            preds = np.array([p for p, _ in assign.pairs])
            lo, hi = layer.bounds.lo, layer.bounds.hi
            enc = np.stack([encode_box(gts[g], lo, hi) for _, g in assign.pairs])
            diff = ad.sub(encode_prediction(ad.index(layer.raw_boxes, preds)), Tensor(enc))
            box = ad.mean(ad.abs_(diff))
        else:
            box = Tensor(0.0)
        term = ad.add(ad.mul(cls, weights.w_cls), ad.mul(box, weights.w_box))
        total = term if total is None else ad.add(total, term)
        per_layer.append((cls.item(), box.item()))
    return LossBreakdown(total, per_layer, chosen)
