import math

import numpy as np
import pytest

from msf3d import autodiff as ad
from msf3d.autodiff import ParamSet, Tensor
from msf3d.boxes import decode_raw
from msf3d.errors import ContractViolation
from msf3d.geometry import SceneBounds, bilinear_sample, project_to_image
from msf3d.gradcheck import tiny_setup
from msf3d.head import (
    CLS_PRIOR,
    FusionContext,
    LayerOutput,
    ffn,
    msf_block,
    msf_cross_attention,
    multi_head_self_attention,
    run_head,
    select_top_k,
)


def _zero_linear(params, prefix, fan_in, fan_out):
    params.add(f"{prefix}.weight", np.zeros((fan_in, fan_out)))
    params.add(f"{prefix}.bias", np.zeros(fan_out))


def test_self_attention_single_query_is_value_path():
    rng = np.random.default_rng(0)
    params = ParamSet()
    for name in ("q", "k", "v", "out"):
        params.add(f"sa.{name}.weight", rng.normal(size=(4, 4)))
        params.add(f"sa.{name}.bias", rng.normal(size=4))
    x = Tensor(rng.normal(size=(1, 4)))
    out = multi_head_self_attention(x, params, "sa", 2).data
    v = x.data @ params["sa.v.weight"].data + params["sa.v.bias"].data
    expect = v @ params["sa.out.weight"].data + params["sa.out.bias"].data
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_self_attention_matches_hand_formula():
    rng = np.random.default_rng(1)
    params = ParamSet()
    for name in ("q", "k", "v", "out"):
        params.add(f"sa.{name}.weight", rng.normal(size=(3, 3)))
        params.add(f"sa.{name}.bias", rng.normal(size=3))
    x = rng.normal(size=(3, 3))
    out = multi_head_self_attention(Tensor(x), params, "sa", 1).data

    def lin(n, z):
        return z @ params[f"sa.{n}.weight"].data + params[f"sa.{n}.bias"].data

    q, k, v = lin("q", x), lin("k", x), lin("v", x)
    a = np.exp(q @ k.T / math.sqrt(3))
    a /= a.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, lin("out", a @ v), atol=1e-10)


def test_ffn_negative_preactivation_gives_second_bias():
    params = ParamSet()
    params.add("f0.weight", np.zeros((2, 3)))
    params.add("f0.bias", -np.ones(3))
    params.add("f1.weight", np.ones((3, 2)))
    params.add("f1.bias", np.array([0.5, -0.5]))
    out = ffn(Tensor(np.ones((4, 2))), params, "f").data
    np.testing.assert_array_equal(out, np.tile([0.5, -0.5], (4, 1)))


def test_cross_attention_constant_maps():
    cfg, params, ctx = tiny_setup(0)
    d = cfg.dim
    v = 0.7
    ctx = FusionContext(
        [[Tensor(np.full(m.shape, v)) for m in pyr] for pyr in ctx.img_pyramids],
        [Tensor(np.zeros(m.shape)) for m in ctx.bev_pyramid],
        ctx.cameras,
        ctx.bounds,
        ctx.grid,
    )
    params["layer0.cross_attn.weight_net.weight"].data[:] = 0.0
    params["layer0.cross_attn.weight_net.bias"].data[:] = 0.0
    # fuse net becomes the identity on the image half
    params["layer0.cross_attn.fuse0.weight"].data = np.vstack([np.eye(d), np.zeros((d, d))])
    params["layer0.cross_attn.fuse0.bias"].data[:] = 0.0
    params["layer0.cross_attn.fuse1.weight"].data = np.eye(d)
    params["layer0.cross_attn.fuse1.bias"].data[:] = 0.0
    q = params["query.embedding"]
    ref = (ctx.bounds.lo + ad.stable_sigmoid(q.data @ params["ref_point.weight"].data + params["ref_point.bias"].data) * ctx.bounds.span)
    valid = project_to_image(Tensor(ref), ctx.cameras[0])[1]
    out = msf_cross_attention(q, ctx, params, "layer0.cross_attn").data
    expect = np.where(valid[:, None], 0.5 * 4 * 1 * v, 0.0) * np.ones((1, d))
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_cross_attention_ignores_levels_with_vanishing_weight():
    cfg, params, ctx = tiny_setup(1)
    params["layer0.cross_attn.weight_net.weight"].data[:, 0] = 0.0
    params["layer0.cross_attn.weight_net.bias"].data[0] = -30.0
    q = params["query.embedding"]
    base = msf_cross_attention(q, ctx, params, "layer0.cross_attn").data
    ctx.img_pyramids[0][0].data = ctx.img_pyramids[0][0].data * 100.0
    moved = msf_cross_attention(q, ctx, params, "layer0.cross_attn").data
    assert np.max(np.abs(moved - base)) < 1e-8


def test_cross_attention_picks_up_delta_peak():
    cfg, params, ctx = tiny_setup(2, num_queries=1)
    cam = ctx.cameras[0]
    q = params["query.embedding"]
    ref = ad.stable_sigmoid(q.data @ params["ref_point.weight"].data + params["ref_point.bias"].data)
    ref = ctx.bounds.lo + ref * ctx.bounds.span
    coords, valid = project_to_image(Tensor(ref), cam)
    if not valid[0]:
        pytest.skip("reference point outside the frustum for this seed")
    direct = bilinear_sample(ctx.img_pyramids[0][0], coords, valid).data
    params["layer0.cross_attn.weight_net.weight"].data[:] = 0.0
    bias = np.full(cfg.num_slots, -40.0)
    bias[0] = 40.0
    params["layer0.cross_attn.weight_net.bias"].data = bias
    d = cfg.dim
    params["layer0.cross_attn.fuse0.weight"].data = np.vstack([np.eye(d), np.zeros((d, d))])
    params["layer0.cross_attn.fuse0.bias"].data[:] = 100.0  # keep relu in its linear range
    params["layer0.cross_attn.fuse1.weight"].data = np.eye(d)
    params["layer0.cross_attn.fuse1.bias"].data[:] = -100.0
    out = msf_cross_attention(q, ctx, params, "layer0.cross_attn").data
    np.testing.assert_allclose(out, direct, atol=1e-9)


def test_cross_attention_needs_cameras():
    cfg, params, ctx = tiny_setup(0)
    empty = FusionContext([], ctx.bev_pyramid, [], ctx.bounds, ctx.grid)
    with pytest.raises(ContractViolation):
        msf_cross_attention(params["query.embedding"], empty, params, "layer0.cross_attn")


def test_block_with_zero_branches_is_triple_layer_norm():
    cfg, params, ctx = tiny_setup(3)
    for name, p in params.items():
        if name.startswith("layer0.") and not name.startswith("layer0.norm"):
            p.data = np.zeros_like(p.data)
    q = params["query.embedding"]
    out = msf_block(q, ctx, params, 0, cfg).data

    def ln(x):
        mu = x.mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + cfg.ln_eps)

    np.testing.assert_allclose(out, ln(ln(ln(q.data))), atol=1e-10)


def test_run_head_emits_one_output_per_layer_with_prior():
    cfg, params, ctx = tiny_setup(0)
    outs = run_head(params, ctx, cfg)
    assert len(outs) == cfg.num_layers
    for o in outs:
        assert o.raw_boxes.shape == (cfg.num_queries, 10)
        assert o.class_logits.shape == (cfg.num_queries, cfg.num_classes)
    assert params["layer1.cls1.bias"].data[0] == pytest.approx(math.log(CLS_PRIOR / (1 - CLS_PRIOR)))


def test_decode_examples():
    b = SceneBounds((-50, -50, -50), (50, 50, 50))
    raw = np.zeros((2, 10))
    raw[0, 7] = 1.0
    raw[1, 6] = 1.0
    dec = decode_raw(raw, b.lo, b.hi)
    np.testing.assert_allclose(dec.centers, 0.0, atol=1e-12)
    np.testing.assert_array_equal(dec.sizes, 1.0)
    assert dec.yaws[0] == 0.0 and dec.yaws[1] == pytest.approx(math.pi / 2)


def _layer_with_scores(scores):
    logits = np.log(np.array(scores) / (1 - np.array(scores)))[:, None]
    logits = np.hstack([logits, np.full((len(scores), 1), -20.0)])
    return LayerOutput(Tensor(np.zeros((len(scores), 10))), Tensor(logits), Tensor(np.zeros((len(scores), 2))), SceneBounds())


def test_select_top_k_order_and_ties():
    boxes = select_top_k(_layer_with_scores([0.9, 0.1, 0.5]), 2)
    assert [round(b.score, 6) for b in boxes] == [0.9, 0.5]
    tied = select_top_k(_layer_with_scores([0.3, 0.7, 0.7, 0.3]), 4)
    assert [round(b.score, 6) for b in tied] == [0.7, 0.7, 0.3, 0.3]
    with pytest.raises(ContractViolation):
        select_top_k(_layer_with_scores([0.5]), 0)
    with pytest.raises(ContractViolation):
        select_top_k(_layer_with_scores([0.5]), 2)


def test_select_top_k_tie_break_is_lower_index():
    layer = _layer_with_scores([0.6, 0.6])
    layer.raw_boxes.data[1, 0] = 1.0  # make the two boxes distinguishable
    first = select_top_k(layer, 1)[0]
    assert first.center == tuple(decode_raw(layer.raw_boxes.data, layer.bounds.lo, layer.bounds.hi).centers[0])


def test_permutation_equivariance_single_trial():
    cfg, params, ctx = tiny_setup(4, num_queries=7)
    q = params["query.embedding"].data
    perm = np.random.default_rng(0).permutation(7)
    with ad.deterministic(True):
        base = run_head(params, ctx, cfg, Tensor(q))
        moved = run_head(params, ctx, cfg, Tensor(q[perm]))
    for a, b in zip(base, moved):
        assert np.array_equal(a.raw_boxes.data[perm], b.raw_boxes.data)
        assert np.array_equal(a.class_logits.data[perm], b.class_logits.data)
