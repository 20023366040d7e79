"""Finite-difference checks for every differentiable op and the composite layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, Parameter, Tensor, grad_check
from .boxes import Box3D
from .geometry import BevGridSpec, CameraModel, SceneBounds, bilinear_sample, project_to_image
from .head import FusionContext, HeadConfig, init_head_params, msf_block, msf_cross_attention, run_head
from .matching import Assignment, hungarian, pairwise_cost, set_loss

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class CheckOutcome:
    name: str
    result: GradCheckResult
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.result.ok and self.result.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.result.failure})" if self.result.failure else ""
        return (
            f"{status} {self.name:<24} max rel err {self.result.max_error:.2e} "
            f"< {self.tolerance:.0e} over {self.result.checked} coords{extra}"
        )


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _probe(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Scalar that weights every output entry differently."""
    weights = np.random.default_rng(rng_seed).normal(size=out.shape)
    return ad.sum_(ad.mul(out, Tensor(weights)))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Parameter]]]:
    a = Parameter("a", rng.normal(size=(4, 5)))
    b = Parameter("b", rng.normal(size=(4, 5)))
    pos = Parameter("pos", rng.uniform(0.5, 2.0, size=(4, 5)))
    kink = Parameter("kink", _away_from_zero(rng, (4, 5)))
    s = Parameter("s", rng.normal(size=()))
    m = Parameter("m", rng.normal(size=(5, 3)))
    bias = Parameter("bias", rng.normal(size=(3,)))
    b3 = Parameter("b3", rng.normal(size=(2, 4, 5)))
    c3 = Parameter("c3", rng.normal(size=(2, 5, 3)))
    gain = Parameter("gain", rng.normal(size=(5,)))
    beta = Parameter("beta", rng.normal(size=(5,)))
    # distinct values per row so the max is unique and stable under eps
    mm = Parameter("mm", rng.permutation(np.linspace(-2.0, 2.0, 3 * 4 * 2)).reshape(3, 4, 2))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    wts = Parameter("wts", rng.normal(size=(3, 4)))
    vals = Parameter("vals", rng.normal(size=(3, 4, 2)))
    fmap = Parameter("fmap", rng.normal(size=(5, 6, 3)))
    grid_pts = Parameter("coords", rng.uniform(0.05, 0.95, size=(7, 2)))
    pool = Parameter("pool", rng.normal(size=(5, 7, 2)))
    pts3 = Parameter("points", np.column_stack([rng.uniform(5, 20, 6), rng.uniform(-3, 3, 6), rng.uniform(-1, 1, 6)]))
    cam = CameraModel.looking_along(0.0, focal=300.0, image_size=(640, 360))
    valid = np.array([1, 1, 1, 0, 1, 1, 1], dtype=bool)
    rows = np.array([3, 0, 5, 1])

    def p(fn, *params):
        return (lambda: _probe(fn()), list(params))

    return {
        "add": p(lambda: ad.add(a, b), a, b),
        "add_scalar": p(lambda: ad.add(a, s), a, s),
        "sub": p(lambda: ad.sub(a, b), a, b),
        "mul": p(lambda: ad.mul(a, b), a, b),
        "div": p(lambda: ad.div(a, pos), a, pos),
        "neg": p(lambda: ad.neg(a), a),
        "scale_shift": p(lambda: ad.scale_shift(a, np.arange(1.0, 6.0), np.ones(5)), a),
        "exp": p(lambda: ad.exp(a), a),
        "log": p(lambda: ad.log(pos), pos),
        "sigmoid": p(lambda: ad.sigmoid(a), a),
        "log_sigmoid": p(lambda: ad.log_sigmoid(a), a),
        "relu": p(lambda: ad.relu(kink), kink),
        "abs": p(lambda: ad.abs_(kink), kink),
        "pow": p(lambda: ad.pow_(pos, 2.5), pos),
        "matmul": p(lambda: ad.matmul(a, m), a, m),
        "bmm": p(lambda: ad.bmm(b3, c3), b3, c3),
        "linear": p(lambda: ad.linear(a, m, bias), a, m, bias),
        "sum": p(lambda: ad.sum_(a, axis=1), a),
        "mean": p(lambda: ad.mean(a, axis=0), a),
        "softmax": p(lambda: ad.softmax(a, axis=-1), a),
        "layer_norm": p(lambda: ad.layer_norm(a, gain, beta, 1e-5), a, gain, beta),
        "masked_max": p(lambda: ad.masked_max(mm, mask), mm),
        "weighted_sum": p(lambda: ad.weighted_sum(wts, vals), wts, vals),
        "reshape": p(lambda: ad.reshape(a, (5, 4)), a),
        "transpose": p(lambda: ad.transpose(b3, (1, 2, 0)), b3),
        "index": p(lambda: ad.index(a, np.array([0, 2, 2, 3])), a),
        "concat": p(lambda: ad.concat([a, b], axis=1), a, b),
        "stack": p(lambda: ad.stack([a, b], axis=0), a, b),
        "scatter_rows": p(lambda: ad.scatter_rows(a, rows, 6), a),
        "avg_pool2x2": p(lambda: ad.avg_pool2x2(pool), pool),
        "bilinear_sample": p(lambda: bilinear_sample(fmap, grid_pts, valid), fmap, grid_pts),
        "project_to_image": p(lambda: project_to_image(pts3, cam)[0], pts3),
    }


def tiny_setup(seed: int = 0, num_queries: int = 5, num_layers: int = 2, dim: int = 8):
    """A small head with one camera and random feature maps, all as parameters."""
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(num_queries=num_queries, dim=dim, num_layers=num_layers, num_heads=2, ffn_dim=16, num_classes=3, num_cameras=1, top_k=num_queries)
    params = init_head_params(cfg, rng)
    bounds = SceneBounds((-8.0, -8.0, -3.0), (8.0, 8.0, 3.0))
    grid = BevGridSpec((-8.0, 8.0), (-8.0, 8.0), 1.0)
    cam = CameraModel.looking_along(0.0, position=(-9.0, 0.0, 0.0), focal=120.0, image_size=(320, 240))
    img = [params.add(f"ctx.img{l}", rng.normal(size=(max(2, 30 >> l), max(2, 40 >> l), dim))) for l in range(4)]
    bev = [params.add(f"ctx.bev{l}", rng.normal(size=(16 >> l, 16 >> l, dim))) for l in range(4)]
    ctx = FusionContext([img], bev, [cam], bounds, grid)
    return cfg, params, ctx


def _composites(seed: int):
    cfg, params, ctx = tiny_setup(seed)
    q = params["query.embedding"]
    gts = [
        Box3D((1.5, -2.0, 0.0), (1.8, 4.2, 1.6), 0.4, (0.5, -0.2), 0),
        Box3D((-3.0, 4.0, -0.5), (0.7, 0.8, 1.7), -1.2, (0.1, 0.3), 2),
    ]
    with ad.no_record():
        layers = run_head(params, ctx, cfg)
    pinned = [hungarian(pairwise_cost(layer, gts)) for layer in layers]
    pinned = [Assignment(list(a.pairs), a.total) for a in pinned]
    all_params = list(params.values())
    layer0 = [p for n, p in params.items() if n.startswith(("layer0.", "ref_point", "ctx.", "query."))]
    cross = [p for n, p in params.items() if n.startswith(("layer0.cross_attn", "ref_point", "ctx.", "query."))]
    return {
        "msf_cross_attention": (
            lambda: _probe(msf_cross_attention(q, ctx, params, "layer0.cross_attn")),
            cross,
        ),
        "msf_block": (lambda: _probe(msf_block(q, ctx, params, 0, cfg)), layer0),
        "set_loss": (lambda: set_loss(run_head(params, ctx, cfg), gts, assignments=pinned).total, all_params),
    }


def run_suite(seed: int = 0, samples: int = 100, eps: float = 1e-6) -> list[CheckOutcome]:
    """Primitive ops at 1e-6 then the three composites at 1e-4."""
    rng = np.random.default_rng(seed)
    outcomes = []
    with ad.deterministic(True):
        for name, (f, params) in primitive_cases(rng).items():
            outcomes.append(CheckOutcome(name, grad_check(f, params, eps, samples, rng), PRIMITIVE_TOL))
        for name, (f, params) in _composites(seed).items():
            outcomes.append(CheckOutcome(name, grad_check(f, params, eps, samples, rng), COMPOSITE_TOL))
    return outcomes
