import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msf3d import autodiff as ad
from msf3d.autodiff import Parameter, Tape, Tensor
from msf3d.boxes import Box3D, raw_from_box
from msf3d.errors import ContractViolation, InputError
from msf3d.geometry import SceneBounds
from msf3d.head import LayerOutput
from msf3d.matching import (
    Assignment,
    CostWeights,
    FocalParams,
    focal_loss,
    hungarian,
    l1_box_loss,
    pairwise_cost,
    set_loss,
)

BOUNDS = SceneBounds((-20, -20, -5), (20, 20, 3))


def brute_force_min(cost):
    m, n = cost.shape
    return min(sum(cost[i, cols[i]] for i in range(m)) for cols in itertools.permutations(range(n), m))


@pytest.mark.parametrize(
    "cost, pairs, total",
    [
        ([[1, 2], [2, 1]], [(0, 0), (1, 1)], 2),
        ([[4, 1], [2, 8]], [(1, 0), (0, 1)], 3),
        ([[5]], [(0, 0)], 5),
    ],
)
def test_hungarian_examples(cost, pairs, total):
    a = hungarian(cost)
    assert a.pairs == pairs and a.total == total


def test_hungarian_errors():
    with pytest.raises(ContractViolation):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(InputError):
        hungarian([[0.0, np.nan]])
    assert hungarian(np.zeros((0, 4))).pairs == []


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31 - 1), st.booleans())
def test_hungarian_matches_brute_force(m, extra, seed, ties):
    rng = np.random.default_rng(seed)
    n = m + extra
    cost = rng.integers(0, 3, size=(m, n)).astype(float) if ties else rng.normal(size=(m, n))
    a = hungarian(cost)
    assert len({p for p, _ in a.pairs}) == m
    assert a.total == pytest.approx(brute_force_min(cost), abs=1e-12)


def test_focal_reduces_to_half_bce():
    x = np.array([[0.3, -1.2], [2.0, 0.1]])
    targets = np.array([0, -1])
    loss = focal_loss(Tensor(x), targets, alpha=0.5, gamma=0.0).item()
    y = np.array([[1, 0], [0, 0]])
    p = 1 / (1 + np.exp(-x))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum()
    assert loss == pytest.approx(0.5 * bce, rel=1e-12)


def test_focal_positive_at_half_probability():
    loss = focal_loss(Tensor([[0.0]]), [0], 0.25, 2.0).item()
    assert loss == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-6)
    assert loss == pytest.approx(0.043322, abs=1e-6)


def test_focal_perfect_prediction_is_near_zero():
    logits = np.full((3, 4), -40.0)
    logits[[0, 1, 2], [1, 3, 0]] = 40.0
    assert focal_loss(Tensor(logits), [1, 3, 0]).item() < 1e-30


def test_l1_examples():
    box = Box3D((1.0, 2.0, -1.0), (2.0, 4.0, 1.5), 0.3, (0.1, -0.2), 0)
    raw = raw_from_box(box, BOUNDS.lo, BOUNDS.hi)
    assert l1_box_loss(Tensor(raw), box, BOUNDS.lo, BOUNDS.hi).item() == pytest.approx(0.0, abs=1e-12)
    shifted = Box3D(box.center, box.size, box.yaw + 2 * math.pi, box.velocity, 0)
    assert l1_box_loss(Tensor(raw), shifted, BOUNDS.lo, BOUNDS.hi).item() == pytest.approx(0.0, abs=1e-12)
    raw[4] += 1.0
    assert l1_box_loss(Tensor(raw), box, BOUNDS.lo, BOUNDS.hi).item() == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ContractViolation):
        l1_box_loss(Tensor(raw), Box3D((50.0, 0, 0), (1, 1, 1)), BOUNDS.lo, BOUNDS.hi)


def _layer(raw, logits):
    n = raw.shape[0]
    return LayerOutput(Parameter("raw", raw), Parameter("logits", logits), Tensor(np.zeros((n, 2))), BOUNDS)


def _random_instance(rng, n, m, k=3):
    gts = [
        Box3D(rng.uniform(-15, 15, 3) * [1, 1, 0.1], rng.uniform(0.5, 4, 3), rng.uniform(-3, 3), rng.normal(size=2), rng.integers(k))
        for _ in range(m)
    ]
    return _layer(rng.normal(size=(n, 10)), rng.normal(size=(n, k))), gts


def test_pairwise_cost_empty_and_saturated():
    layer, _ = _random_instance(np.random.default_rng(0), 4, 0)
    assert pairwise_cost(layer, []).shape == (0, 4)
    gt = Box3D((1.0, 1.0, 0.0), (1.0, 2.0, 1.0), 0.5, (0.0, 0.0), 1)
    logits = np.full((1, 3), -50.0)
    logits[0, 1] = 50.0
    layer = _layer(raw_from_box(gt, BOUNDS.lo, BOUNDS.hi)[None, :], logits)
    w = CostWeights()
    c = pairwise_cost(layer, [gt], w)[0, 0]
    # saturated: positive term ~0, negative term (of a correct logit) ~ large; the cost is the
    # focal gain of labelling this query, which is strongly negative
    assert c < -w.w_cls


def test_cost_equals_loss_difference():
    rng = np.random.default_rng(5)
    layer, gts = _random_instance(rng, 5, 2)
    w, f = CostWeights(), FocalParams()
    cost = pairwise_cost(layer, gts, w, f)
    empty = set_loss([layer], [], w, f, [Assignment([])]).total.item()
    for i, j in [(0, 1), (1, 3)]:
        pinned = Assignment([(j, 0)])
        # one matched pair with M = 1: loss = (focal_all_negative + cost) / 1
        loss = set_loss([layer], [gts[i]], w, f, [pinned]).total.item()
        assert loss == pytest.approx(empty + cost[i, j], abs=1e-12)


def test_cost_matrix_solution_matches_brute_force():
    rng = np.random.default_rng(9)
    layer, gts = _random_instance(rng, 5, 3)
    cost = pairwise_cost(layer, gts)
    assert hungarian(cost).total == pytest.approx(brute_force_min(cost), abs=1e-12)


def test_set_loss_hungarian_minimizes_over_all_assignments():
    rng = np.random.default_rng(11)
    layer, gts = _random_instance(rng, 4, 2)
    chosen = set_loss([layer], gts)
    best = min(
        set_loss([layer], gts, assignments=[Assignment([(p, g) for g, p in enumerate(cols)])]).total.item()
        for cols in itertools.permutations(range(4), 2)
    )
    assert chosen.total.item() == pytest.approx(best, abs=1e-12)


def test_set_loss_without_objects_has_zero_box_term():
    layer, _ = _random_instance(np.random.default_rng(1), 6, 0)
    out = set_loss([layer, layer], [])
    assert all(box == 0.0 for _, box in out.per_layer)
    expect = focal_loss(layer.class_logits, np.full(6, -1)).item()
    assert out.per_layer[0][0] == pytest.approx(expect)


def test_set_loss_perfect_prediction_is_near_zero():
    gts = [Box3D((1.0, -2.0, 0.0), (1.5, 3.0, 1.0), 0.2, (0.3, 0.0), 2), Box3D((-5.0, 4.0, 1.0), (0.5, 0.6, 1.7), -1.0, (0.0, 0.1), 0)]
    raw = np.stack([raw_from_box(g, BOUNDS.lo, BOUNDS.hi) for g in gts] + [np.zeros(10)])
    logits = np.full((3, 3), -60.0)
    logits[0, 2] = logits[1, 0] = 60.0
    total = set_loss([_layer(raw, logits)], gts).total.item()
    assert total < 1e-12


def test_set_loss_gradients_flow_to_predictions():
    rng = np.random.default_rng(2)
    layer, gts = _random_instance(rng, 4, 2)
    with Tape() as tape:
        out = set_loss([layer], gts)
    g = tape.backward(out.total)
    assert np.abs(g[layer.raw_boxes]).sum() > 0 and np.abs(g[layer.class_logits]).sum() > 0
    unmatched = sorted(set(range(4)) - {p for p, _ in out.assignments[0].pairs})
    assert np.all(g[layer.raw_boxes][unmatched] == 0)
