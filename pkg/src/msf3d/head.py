"""Query-based transformer head fusing multi-view image and BEV features.

Each block refines the queries with self-attention, a fusion cross-attention
that samples both sensors at the query's reference point, and an FFN, all
post-norm residual.  Every block feeds its own box and class heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .boxes import REG_DIM, Box3D, DecodedBoxes, decode_raw
from .errors import ContractViolation, DimensionError
from .geometry import (
    BevGridSpec,
    CameraModel,
    SceneBounds,
    bilinear_sample,
    decode_reference_points,
    project_to_bev,
    project_to_image,
)

NUM_LEVELS = 4
CLS_PRIOR = 0.01


@dataclass
class HeadConfig:
    num_queries: int = 900
    dim: int = 256
    num_layers: int = 6
    num_heads: int = 8
    ffn_dim: int = 512
    num_classes: int = 10
    num_cameras: int = 6
    top_k: int = 300
    weight_norm: str = "sigmoid"  # or "softmax" across all sampling slots
    share_ref_points: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.num_queries < 1 or self.num_layers < 1 or self.num_cameras < 1:
            raise ContractViolation("num_queries, num_layers and num_cameras must be >= 1")
        if self.dim % self.num_heads:
            raise ContractViolation(f"num_heads {self.num_heads} must divide dim {self.dim}")
        if self.weight_norm not in ("sigmoid", "softmax"):
            raise ContractViolation(f"weight_norm must be 'sigmoid' or 'softmax', got {self.weight_norm!r}")

    @property
    def num_slots(self) -> int:
        return NUM_LEVELS * (self.num_cameras + 1)


@dataclass
class FusionContext:
    """Everything the cross-attention samples from for one scene."""

    img_pyramids: list[list[Tensor]]  # per camera, 4 maps (h, w, d)
    bev_pyramid: list[Tensor]  # 4 maps (h, w, d)
    cameras: list[CameraModel]
    bounds: SceneBounds = field(default_factory=SceneBounds)
    grid: BevGridSpec = field(default_factory=BevGridSpec)


@dataclass
class LayerOutput:
    raw_boxes: Tensor  # (N, 10)
    class_logits: Tensor  # (N, K)
    queries: Tensor  # (N, d)
    bounds: SceneBounds

    def decode(self) -> DecodedBoxes:
        boxes = decode_raw(self.raw_boxes.data, self.bounds.lo, self.bounds.hi)
        probs = ad.stable_sigmoid(self.class_logits.data)
        boxes.labels = probs.argmax(axis=1)
        boxes.scores = probs.max(axis=1)
        return boxes

    def boxes(self) -> list[Box3D]:
        decoded = self.decode()
        return [decoded.box(i) for i in range(len(decoded))]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(params: ParamSet, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    params.add(f"{prefix}.weight", _uniform(rng, fan_in, (fan_in, fan_out)))
    params.add(f"{prefix}.bias", _uniform(rng, fan_in, (fan_out,)))


def init_head_params(cfg: HeadConfig, rng: np.random.Generator, params: ParamSet | None = None) -> ParamSet:
    params = ParamSet() if params is None else params
    d = cfg.dim
    params.add("query.embedding", rng.uniform(-1.0, 1.0, size=(cfg.num_queries, d)))
    if cfg.share_ref_points:
        _add_linear(params, "ref_point", d, 3, rng)
    for l in range(cfg.num_layers):
        p = f"layer{l}"
        for name in ("q", "k", "v", "out"):
            _add_linear(params, f"{p}.self_attn.{name}", d, d, rng)
        if not cfg.share_ref_points:
            _add_linear(params, f"{p}.ref_point", d, 3, rng)
        _add_linear(params, f"{p}.cross_attn.weight_net", d, cfg.num_slots, rng)
        _add_linear(params, f"{p}.cross_attn.fuse0", 2 * d, d, rng)
        _add_linear(params, f"{p}.cross_attn.fuse1", d, d, rng)
        _add_linear(params, f"{p}.ffn0", d, cfg.ffn_dim, rng)
        _add_linear(params, f"{p}.ffn1", cfg.ffn_dim, d, rng)
        for k in (1, 2, 3):
            params.add(f"{p}.norm{k}.gain", np.ones(d))
            params.add(f"{p}.norm{k}.bias", np.zeros(d))
        _add_linear(params, f"{p}.reg0", d, d, rng)
        _add_linear(params, f"{p}.reg1", d, REG_DIM, rng)
        _add_linear(params, f"{p}.cls0", d, d, rng)
        _add_linear(params, f"{p}.cls1", d, cfg.num_classes, rng)
        params[f"{p}.cls1.bias"].data = np.full(cfg.num_classes, -math.log((1 - CLS_PRIOR) / CLS_PRIOR))
    return params


def _ref_point_prefix(cfg: HeadConfig, layer: int) -> str:
    return "ref_point" if cfg.share_ref_points else f"layer{layer}.ref_point"


def multi_head_self_attention(x: Tensor, params: ParamSet, prefix: str, num_heads: int) -> Tensor:
    """Scaled dot-product attention over the query set.

    Keys and values are taken in a content-sorted row order.  That leaves
    the math unchanged but makes every reduction over keys independent of
    how the queries happen to be ordered.
    """
    n, d = x.shape
    if d % num_heads:
        raise ContractViolation(f"num_heads {num_heads} must divide {d}")
    dh = d // num_heads
    order = np.lexsort(x.data.T[::-1])
    keys_in = ad.index(x, order)

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(t.reshape(t.shape[0], num_heads, dh), (1, 0, 2))

    q = heads(ad.linear(x, *params.linear(f"{prefix}.q")))
    k = heads(ad.linear(keys_in, *params.linear(f"{prefix}.k")))
    v = heads(ad.linear(keys_in, *params.linear(f"{prefix}.v")))
    scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.transpose(ad.bmm(attn, v), (1, 0, 2)).reshape(n, d)
    return ad.linear(mixed, *params.linear(f"{prefix}.out"))


def sample_features(ref: Tensor, ctx: FusionContext) -> tuple[list[Tensor], list[Tensor]]:
    """Image samples ordered (view, level) and BEV samples ordered by level."""
    img = []
    for cam, pyramid in zip(ctx.cameras, ctx.img_pyramids):
        coords, valid = project_to_image(ref, cam)
        img.extend(bilinear_sample(level, coords, valid) for level in pyramid)
    coords, valid = project_to_bev(ref, ctx.grid)
    bev = [bilinear_sample(level, coords, valid) for level in ctx.bev_pyramid]
    return img, bev


def msf_cross_attention(
    q: Tensor,
    ctx: FusionContext,
    params: ParamSet,
    prefix: str,
    ref_prefix: str = "ref_point",
    weight_norm: str = "sigmoid",
) -> Tensor:
    """Fuse image and BEV samples at each query's reference point."""
    if not ctx.cameras:
        raise ContractViolation("cross-attention needs at least one camera")
    if len(ctx.img_pyramids) != len(ctx.cameras):
        raise ContractViolation("one image pyramid per camera is required")
    d = q.shape[1]
    for level in [*ctx.bev_pyramid, *(m for pyr in ctx.img_pyramids for m in pyr)]:
        if level.shape[-1] != d:
            raise DimensionError(f"feature map {level.shape} does not carry {d} channels")
    ref = decode_reference_points(q, *params.linear(ref_prefix), ctx.bounds)
    img, bev = sample_features(ref, ctx)
    n_img = len(img)
    logits = ad.linear(q, *params.linear(f"{prefix}.weight_net"))
    if logits.shape[1] != n_img + len(bev):
        raise DimensionError(f"weight net emits {logits.shape[1]} slots, sampling produced {n_img + len(bev)}")
    weights = ad.sigmoid(logits) if weight_norm == "sigmoid" else ad.softmax(logits, axis=1)
    g_img = ad.weighted_sum(weights[:, :n_img], ad.stack(img, axis=1))
    g_bev = ad.weighted_sum(weights[:, n_img:], ad.stack(bev, axis=1))
    fused = ad.relu(ad.linear(ad.concat([g_img, g_bev], axis=1), *params.linear(f"{prefix}.fuse0")))
    return ad.linear(fused, *params.linear(f"{prefix}.fuse1"))


def ffn(q: Tensor, params: ParamSet, prefix: str) -> Tensor:
    hidden = ad.relu(ad.linear(q, *params.linear(f"{prefix}0")))
    return ad.linear(hidden, *params.linear(f"{prefix}1"))


def msf_block(q: Tensor, ctx: FusionContext, params: ParamSet, layer: int, cfg: HeadConfig) -> Tensor:
    p = f"layer{layer}"

    def norm(x, k):
        return ad.layer_norm(x, params[f"{p}.norm{k}.gain"], params[f"{p}.norm{k}.bias"], cfg.ln_eps)

    q1 = norm(ad.add(q, multi_head_self_attention(q, params, f"{p}.self_attn", cfg.num_heads)), 1)
    cross = msf_cross_attention(q1, ctx, params, f"{p}.cross_attn", _ref_point_prefix(cfg, layer), cfg.weight_norm)
    q2 = norm(ad.add(q1, cross), 2)
    return norm(ad.add(q2, ffn(q2, params, f"{p}.ffn")), 3)


def predict(q: Tensor, params: ParamSet, layer: int, bounds: SceneBounds) -> LayerOutput:
    p = f"layer{layer}"
    raw = ad.linear(ad.relu(ad.linear(q, *params.linear(f"{p}.reg0"))), *params.linear(f"{p}.reg1"))
    logits = ad.linear(ad.relu(ad.linear(q, *params.linear(f"{p}.cls0"))), *params.linear(f"{p}.cls1"))
    return LayerOutput(raw, logits, q, bounds)


def run_head(params: ParamSet, ctx: FusionContext, cfg: HeadConfig, queries: Tensor | None = None) -> list[LayerOutput]:
    """Apply the L blocks in sequence; one output per block, the last is used at inference."""
    q = params["query.embedding"] if queries is None else queries
    outputs = []
    for layer in range(cfg.num_layers):
        q = msf_block(q, ctx, params, layer, cfg)
        outputs.append(predict(q, params, layer, ctx.bounds))
    return outputs


def select_top_k(final: LayerOutput, k: int) -> list[Box3D]:
    """Highest-scoring k boxes, ties broken by lower query index; no NMS."""
    if k <= 0:
        raise ContractViolation(f"k must be positive, got {k}")
    decoded = final.decode()
    if k > len(decoded):
        raise ContractViolation(f"k={k} exceeds the {len(decoded)} available queries")
    order = np.lexsort((np.arange(len(decoded)), -decoded.scores))[:k]
    return [decoded.box(int(i)) for i in order]
