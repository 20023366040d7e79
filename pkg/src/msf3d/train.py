"""Detector assembly, optimizer, learning-rate schedule, checkpoints and inference."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape, Tensor
from .boxes import Box3D
from .errors import ContractViolation, DimensionError, InputError, NumericError
from .geometry import BevGridSpec, SceneBounds
from .head import FusionContext, HeadConfig, LayerOutput, init_head_params, run_head, select_top_k
from .matching import CostWeights, FocalParams, set_loss
from .metrics import DetectionRecord, GroundTruthRecord
from .pointcloud import (
    NUM_LEVELS,
    build_bev_pyramid,
    encode_pillars,
    init_lidar_params,
    pillarize,
    voxel_bev_map,
    voxelize,
)
from .scene import Scene, SceneSpec, generate_scene, synthesize_image_pyramids

# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    w_cls: float = 2.0
    w_box: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass(frozen=True)
class LidarConfig:
    encoder: str = "pillar"  # or "voxel"
    max_points: int = 32
    max_pillars: int = 4096
    voxel_size: float = 0.2

    def __post_init__(self):
        if self.encoder not in ("pillar", "voxel"):
            raise InputError(f"unknown LiDAR encoder {self.encoder!r}")


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    cell_size: float = 0.2
    bounds_min: tuple[float, float, float] = (-51.2, -51.2, -5.0)
    bounds_max: tuple[float, float, float] = (51.2, 51.2, 3.0)

    @property
    def grid(self) -> BevGridSpec:
        return BevGridSpec(self.x_range, self.y_range, self.cell_size)

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds(self.bounds_min, self.bounds_max)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    batch_size: int = 1
    peak_lr: float = 2e-4
    weight_decay: float = 1e-2
    warmup_steps: int = 2000
    min_lr: float = 2e-7
    total_steps: int | None = None  # None: epochs * ceil(num_scenes / batch_size)
    grad_clip: float | None = 35.0
    seed: int = 0
    num_scenes: int = 8
    image_channels: int = 8
    deterministic: bool = True
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if not 0 < self.min_lr <= self.peak_lr:
            raise ContractViolation(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if self.warmup_steps < 0:
            raise ContractViolation("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.num_scenes < 0:
            raise ContractViolation("batch_size must be >= 1; epochs and num_scenes >= 0")
        if self.image_channels < 4:
            raise ContractViolation("image_channels must be >= 4")
        if self.head.num_cameras != self.scene.num_cameras:
            raise ContractViolation(
                f"head expects {self.head.num_cameras} cameras, scenes have {self.scene.num_cameras}"
            )

    @property
    def steps(self) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * math.ceil(self.num_scenes / self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return json.loads(json.dumps(d))  # tuples become lists

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        nested = {"head": HeadConfig, "loss": LossConfig, "lidar": LidarConfig, "grid": GridConfig}
        _reject_unknown(cls, d, "config")
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                _reject_unknown(nested[key], value, key)
                kwargs[key] = nested[key](**_tuples(value))
            elif key == "scene":
                kwargs[key] = SceneSpec.from_dict(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def model_dict(self) -> dict:
        """The settings that fix parameter shapes and the forward pass."""
        d = self.to_dict()
        return {k: d[k] for k in ("head", "lidar", "grid", "image_channels")}


def _reject_unknown(kind, d, where: str) -> None:
    if not isinstance(d, dict):
        raise InputError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - {f.name for f in fields(kind)}
    if unknown:
        raise InputError(f"{where}: unknown key(s) {sorted(unknown)}")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        return TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise InputError(f"{path}: {exc}") from exc


# -- schedule and optimizer ----------------------------------------------------------


def cosine_warmup_lr(step: int, peak: float, min_lr: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then cosine down to ``min_lr`` at ``total``.

    The cosine phase is written as a convex blend of the two endpoints so that
    both are hit exactly.  Steps past ``total`` stay at ``min_lr``.
    """
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}")
    if total <= warmup:
        raise ContractViolation(f"total steps {total} must exceed warmup {warmup}")
    if step < warmup:
        return peak * step / warmup
    if step >= total:
        return min_lr
    w = 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))
    return min_lr * (1.0 - w) + peak * w


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls(
            OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items()),
            OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items()),
            0,
        )


def check_finite_grads(grads: dict) -> None:
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradient in parameter(s): {', '.join(bad)}")


def clip_grad_norm(grads: dict, max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(
    params: ParamSet,
    grads: dict,
    state: AdamState,
    lr: float,
    weight_decay: float = 1e-2,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-decay Adam update, in place on ``params`` and ``state``."""
    check_finite_grads(grads)
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"{name}: gradient {grads[name].shape} vs parameter {p.shape}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        decayed = p.data * (1.0 - lr * weight_decay)
        p.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- model ----------------------------------------------------------------------------


@dataclass
class SceneInputs:
    """Everything the forward pass needs from a scene, precomputed once."""

    scene: Scene
    pillars: object | None
    voxel_map: np.ndarray | None
    images: list[list[np.ndarray]]


class Detector:
    """LiDAR encoder, image feature adapters and the fusion head."""

    def __init__(self, config: TrainConfig, params: ParamSet | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = ParamSet()
            init_lidar_params(params, config.head.dim, rng, config.lidar.encoder)
            for level in range(NUM_LEVELS):
                bound = 1.0 / math.sqrt(config.image_channels)
                params.add(f"image.proj{level}.weight", rng.uniform(-bound, bound, (config.image_channels, config.head.dim)))
                params.add(f"image.proj{level}.bias", rng.uniform(-bound, bound, (config.head.dim,)))
            init_head_params(config.head, rng, params)
        self.params = params

    def prepare(self, scene: Scene) -> SceneInputs:
        cfg = self.config
        if len(scene.cameras) != cfg.head.num_cameras:
            raise ContractViolation(f"scene {scene.sample_id} has {len(scene.cameras)} cameras, model expects {cfg.head.num_cameras}")
        grid = cfg.grid.grid
        pillars = voxel_map = None
        if cfg.lidar.encoder == "pillar":
            pillars = pillarize(scene.cloud, grid, cfg.lidar.max_points, cfg.lidar.max_pillars)
        else:
            bounds = cfg.grid.bounds
            voxels = voxelize(scene.cloud, cfg.lidar.voxel_size, bounds)
            voxel_map = voxel_bev_map(voxels, cfg.lidar.voxel_size, grid, bounds)
        return SceneInputs(scene, pillars, voxel_map, synthesize_image_pyramids(scene, cfg.image_channels))

    def context(self, inputs: SceneInputs) -> FusionContext:
        cfg, params = self.config, self.params
        grid = cfg.grid.grid
        if inputs.pillars is not None:
            base = encode_pillars(inputs.pillars, *params.linear("lidar.pillar"), grid)
        else:
            base = Tensor(inputs.voxel_map)
        bev = build_bev_pyramid(base, params)
        images = []
        for pyramid in inputs.images:
            levels = []
            for level, fmap in enumerate(pyramid):
                h, w, c = fmap.shape
                proj = ad.linear(Tensor(fmap.reshape(h * w, c)), *params.linear(f"image.proj{level}"))
                levels.append(proj.reshape(h, w, cfg.head.dim))
            images.append(levels)
        return FusionContext(images, bev, inputs.scene.cameras, cfg.grid.bounds, grid)

    def forward(self, inputs: SceneInputs, queries: Tensor | None = None) -> list[LayerOutput]:
        return run_head(self.params, self.context(inputs), self.config.head, queries)

    def detect(self, inputs: SceneInputs, k: int | None = None) -> list[Box3D]:
        k = self.config.head.top_k if k is None else k
        with ad.no_record():
            final = self.forward(inputs)[-1]
        return select_top_k(final, min(k, self.config.head.num_queries))


# -- checkpoints ------------------------------------------------------------------------

MAGIC = b"MSF3DCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int
    params: "OrderedDict[str, np.ndarray]"
    adam: AdamState | None = None

    def to_bytes(self) -> bytes:
        """Versioned little-endian layout.

        magic, u32 version, u64 step, u32 config length, config JSON (sorted
        keys), then parameter records (u32 name length, name, u32 rank, u64
        extents, f64 payload); then u8 moments flag and, when set, u64 Adam
        step and m and v records in parameter order.
        """
        out = bytearray(MAGIC)
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        out += struct.pack("<IQI", CKPT_VERSION, self.step, len(cfg)) + cfg
        out += _pack_arrays(self.params)
        if self.adam is None:
            out += struct.pack("<B", 0)
        else:
            out += struct.pack("<BQ", 1, self.adam.t)
            out += _pack_arrays(self.adam.m) + _pack_arrays(self.adam.v)
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        reader = _Reader(raw)
        if reader.take(len(MAGIC)) != MAGIC:
            raise InputError("not a checkpoint file (bad magic)")
        version, step, cfg_len = reader.unpack("<IQI")
        if version != CKPT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        config = json.loads(reader.take(cfg_len))
        params = _unpack_arrays(reader)
        (flag,) = reader.unpack("<B")
        adam = None
        if flag:
            (t,) = reader.unpack("<Q")
            m, v = _unpack_arrays(reader), _unpack_arrays(reader)
            if list(m) != list(params) or list(v) != list(params):
                raise InputError("optimizer moments do not match the parameter names")
            adam = AdamState(m, v, t)
        if reader.pos != len(raw):
            raise InputError(f"{len(raw) - reader.pos} trailing bytes after checkpoint")
        return cls(config, step, params, adam)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(raw)


def _pack_arrays(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    out = bytearray(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        key = name.encode()
        out += struct.pack("<I", len(key)) + key
        out += struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise InputError("checkpoint is truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_arrays(reader: _Reader) -> "OrderedDict[str, np.ndarray]":
    (count,) = reader.unpack("<I")
    arrays = OrderedDict()
    for _ in range(count):
        (n,) = reader.unpack("<I")
        name = reader.take(n).decode()
        if name in arrays:
            raise InputError(f"parameter {name!r} appears twice")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        arrays[name] = data
    return arrays


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Readable list of keys whose values differ between two nested dicts."""
    lines = []
    for key in sorted(set(a) | set(b)):
        path = f"{prefix}{key}"
        if key not in a or key not in b:
            lines.append(f"{path}: {a.get(key, '<missing>')!r} != {b.get(key, '<missing>')!r}")
        elif isinstance(a[key], dict) and isinstance(b[key], dict):
            lines.extend(config_diff(a[key], b[key], path + "."))
        elif a[key] != b[key]:
            lines.append(f"{path}: {a[key]!r} != {b[key]!r}")
    return lines


def detector_from_checkpoint(ckpt: Checkpoint, expect: TrainConfig | None = None) -> Detector:
    config = TrainConfig.from_dict(ckpt.config)
    if expect is not None:
        diff = config_diff(config.model_dict(), expect.model_dict())
        if diff:
            raise ContractViolation("config does not match checkpoint:\n  " + "\n  ".join(diff))
    detector = Detector(config)
    detector.params.load_arrays(ckpt.params)
    return detector


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    detector: Detector


def make_scenes(config: TrainConfig) -> list[Scene]:
    return [generate_scene(config.scene, config.scene.seed + i) for i in range(config.num_scenes)]


def train(
    config: TrainConfig,
    scenes: Sequence[Scene] | None = None,
    on_step: Callable[[dict], None] | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Full pipeline per step: LiDAR and image features, head, set loss, backward, AdamW.

    Scenes are visited in order, ``batch_size`` at a time; the batch loss is
    the mean of the per-scene losses.  The learning rate for update ``s``
    (counted from 1) is ``cosine_warmup_lr(s)``.
    """
    scenes = make_scenes(config) if scenes is None else list(scenes)
    detector = Detector(config)
    params = detector.params
    state = AdamState.zeros_like(params)
    total = config.steps
    if total and not scenes:
        raise InputError("training needs at least one scene")
    inputs = [detector.prepare(s) for s in scenes]
    weights = CostWeights(config.loss.w_cls, config.loss.w_box)
    focal = FocalParams(config.loss.alpha, config.loss.gamma)
    log = []
    cursor = 0
    with ad.deterministic(config.deterministic):
        for step in range(1, total + 1):
            lr = cosine_warmup_lr(step, config.peak_lr, config.min_lr, config.warmup_steps, total)
            batch = [inputs[(cursor + i) % len(inputs)] for i in range(config.batch_size)]
            cursor = (cursor + config.batch_size) % len(inputs)
            with Tape() as tape:
                loss = None
                per_layer = np.zeros((config.head.num_layers, 2))
                for item in batch:
                    gts = item.scene.gt
                    breakdown = set_loss(detector.forward(item), gts, weights, focal)
                    per_layer += np.asarray(breakdown.per_layer)
                    loss = breakdown.total if loss is None else ad.add(loss, breakdown.total)
                loss = ad.mul(loss, 1.0 / len(batch))
            per_layer /= len(batch)
            for layer, (cls, box) in enumerate(per_layer):
                for term, value in (("cls", cls), ("box", box)):
                    if not math.isfinite(value):
                        raise NumericError(f"step {step}: non-finite {term} loss in layer {layer}")
            grads = ad.backward(tape, loss, params)
            check_finite_grads(grads)
            norm = clip_grad_norm(grads, config.grad_clip)
            adamw_step(params, grads, state, lr, config.weight_decay)
            entry = {
                "step": step,
                "lr": lr,
                "loss": loss.item(),
                "grad_norm": norm,
                "layers": [{"cls": float(c), "box": float(b)} for c, b in per_layer],
            }
            log.append(entry)
            if on_step is not None:
                on_step(entry)
            if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                ckpt = Checkpoint(config.to_dict(), step, params.arrays(), state)
                ckpt.save(Path(checkpoint_dir) / f"step-{step:07d}.ckpt")
    final = Checkpoint(config.to_dict(), total, OrderedDict((n, a.copy()) for n, a in params.arrays().items()), state)
    return TrainResult(final, log, detector)


# -- inference -------------------------------------------------------------------------------


def infer(
    checkpoint: Checkpoint,
    scenes: Sequence[Scene],
    config: TrainConfig | None = None,
    k: int | None = None,
) -> list[DetectionRecord]:
    """Top-k last-layer boxes per scene, highest score first, no NMS."""
    detector = detector_from_checkpoint(checkpoint, config)
    records = []
    with ad.deterministic(detector.config.deterministic):
        for scene in scenes:
            for box in detector.detect(detector.prepare(scene), k):
                records.append(DetectionRecord.from_box(scene.sample_id, box))
    return records


def ground_truth_records(scenes: Sequence[Scene]) -> list[GroundTruthRecord]:
    return [GroundTruthRecord.from_box(s.sample_id, b) for s in scenes for b in s.gt]
