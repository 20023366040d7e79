"""Toy LiDAR encoders: pillars, voxels and a 4-level BEV feature pyramid.

Dense BEV maps are laid out like images: ``map[iy, ix, :]`` so that the
normalized (x, y) coordinates from :func:`geometry.project_to_bev` address
(column, row).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ContractViolation, DimensionError, InputError
from .geometry import BevGridSpec, SceneBounds

AUG_DIM = 9
NUM_LEVELS = 4


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 4): x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ContractViolation(f"point cloud must be (P, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractViolation("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Pillar:
    cell: tuple[int, int]
    features: np.ndarray  # (count, 9)


@dataclass
class Pillars:
    """Pillars in first-seen order with zero-padded per-point features."""

    cells: np.ndarray  # (n, 2) int: (ix, iy)
    features: np.ndarray  # (n, max_points, 9)
    counts: np.ndarray  # (n,)
    dropped: int  # points removed by either cap
    out_of_range: int

    def __len__(self) -> int:
        return len(self.cells)

    def __getitem__(self, i: int) -> Pillar:
        return Pillar((int(self.cells[i, 0]), int(self.cells[i, 1])), self.features[i, : self.counts[i]])

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.counts[:, None]


def _sorted_mean(values: np.ndarray) -> float:
    # summing in value order makes the result independent of point order
    return float(np.sort(values).sum() / len(values))


def pillarize(
    cloud: PointCloud,
    grid: BevGridSpec,
    max_points: int = 32,
    max_pillars: int = 4096,
) -> Pillars:
    """Group points into vertical BEV columns.

    Pillars are numbered in order of their first in-range point.  Points past
    ``max_points`` in a pillar, and every point of pillars past
    ``max_pillars``, are dropped in input order.
    """
    pts = cloud.points
    idx = grid.cell_index(pts[:, :2]) if len(pts) else np.zeros((0, 2), dtype=np.int64)
    inside = (idx[:, 0] >= 0) & (idx[:, 0] < grid.nx) & (idx[:, 1] >= 0) & (idx[:, 1] < grid.ny)
    out_of_range = int((~inside).sum())

    members: dict[tuple[int, int], list[int]] = {}
    dropped = 0
    for i in np.nonzero(inside)[0]:
        key = (int(idx[i, 0]), int(idx[i, 1]))
        rows = members.get(key)
        if rows is None:
            if len(members) >= max_pillars:
                dropped += 1
                continue
            rows = members[key] = []
        if len(rows) >= max_points:
            dropped += 1
            continue
        rows.append(i)

    n = len(members)
    cells = np.array(list(members.keys()), dtype=np.int64).reshape(n, 2)
    feats = np.zeros((n, max_points, AUG_DIM))
    counts = np.zeros(n, dtype=np.int64)
    centers = grid.cell_center(cells) if n else np.zeros((0, 2))
    for k, rows in enumerate(members.values()):
        p = pts[rows]
        m = len(rows)
        counts[k] = m
        means = np.array([_sorted_mean(p[:, a]) for a in range(3)])
        feats[k, :m, 0:4] = p
        feats[k, :m, 4:7] = p[:, :3] - means
        feats[k, :m, 7:9] = p[:, :2] - centers[k]
    return Pillars(cells, feats, counts, dropped, out_of_range)


def init_lidar_params(
    params: ParamSet,
    channels: int,
    rng: np.random.Generator,
    encoder: str = "pillar",
    prefix: str = "lidar",
) -> ParamSet:
    """Pillar encoder (9 -> c, pillar path only) and per-level pyramid transforms.

    The voxel path feeds 4-channel height-compressed maps, so its first
    pyramid transform is 4 -> c.
    """
    if encoder not in ("pillar", "voxel"):
        raise InputError(f"unknown LiDAR encoder {encoder!r}")

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if encoder == "pillar":
        params.add(f"{prefix}.pillar.weight", uniform(AUG_DIM, (AUG_DIM, channels)))
        params.add(f"{prefix}.pillar.bias", uniform(AUG_DIM, (channels,)))
    for level in range(NUM_LEVELS):
        fan_in = 4 if (level == 0 and encoder == "voxel") else channels
        params.add(f"{prefix}.fpn{level}.weight", uniform(fan_in, (fan_in, channels)))
        params.add(f"{prefix}.fpn{level}.bias", uniform(fan_in, (channels,)))
    return params


def encode_pillars(pillars: Pillars, weight: Tensor, bias: Tensor, grid: BevGridSpec) -> Tensor:
    """Per-pillar max over relu(linear(point features)), scattered to a (ny, nx, c) map."""
    if weight.shape[0] != AUG_DIM:
        raise DimensionError(f"pillar encoder expects {AUG_DIM} inputs, got weight {weight.shape}")
    c = weight.shape[1]
    n, m = len(pillars), pillars.features.shape[1]
    if n == 0:
        return Tensor(np.zeros((grid.ny, grid.nx, c)))
    flat = Tensor(pillars.features.reshape(n * m, AUG_DIM))
    per_point = ad.relu(ad.linear(flat, weight, bias)).reshape(n, m, c)
    pooled = ad.masked_max(per_point, pillars.mask)
    rows = pillars.cells[:, 1] * grid.nx + pillars.cells[:, 0]
    return ad.scatter_rows(pooled, rows, grid.ny * grid.nx).reshape(grid.ny, grid.nx, c)


@dataclass
class Voxels:
    indices: np.ndarray  # (n, 3) int, lexicographically sorted
    means: np.ndarray  # (n, 4)
    counts: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.indices)


def voxelize(cloud: PointCloud, voxel_size: float, bounds: SceneBounds | None = None) -> Voxels:
    """Mean point feature and count per occupied voxel.

    Voxel (i, j, k) covers ``floor((p - origin) / voxel_size)``, with the origin at
    ``bounds.min`` (or 0 when unbounded).  Sums accumulate in input order.
    """
    if voxel_size <= 0:
        raise ContractViolation("voxel_size must be positive")
    pts = cloud.points
    origin = np.zeros(3) if bounds is None else bounds.lo
    if bounds is not None:
        pts = pts[bounds.contains(pts[:, :3])] if len(pts) else pts
    if len(pts) == 0:
        return Voxels(np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    idx = np.floor((pts[:, :3] - origin) / voxel_size).astype(np.int64)
    keys, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(keys), 4))
    np.add.at(sums, inverse, pts)  # unbuffered: one add per point, in input order
    return Voxels(keys, sums / counts[:, None], counts)


def voxel_bev_map(voxels: Voxels, voxel_size: float, grid: BevGridSpec, bounds: SceneBounds | None = None) -> np.ndarray:
    """Height-compressed (ny, nx, 4) map: mean of voxel features per BEV cell."""
    out = np.zeros((grid.ny, grid.nx, 4))
    if len(voxels) == 0:
        return out
    origin = np.zeros(3) if bounds is None else bounds.lo
    centers = origin[:2] + (voxels.indices[:, :2] + 0.5) * voxel_size
    cell = grid.cell_index(centers)
    ok = (cell[:, 0] >= 0) & (cell[:, 0] < grid.nx) & (cell[:, 1] >= 0) & (cell[:, 1] < grid.ny)
    rows = cell[ok, 1] * grid.nx + cell[ok, 0]
    sums = np.zeros((grid.ny * grid.nx, 4))
    hits = np.zeros(grid.ny * grid.nx)
    np.add.at(sums, rows, voxels.means[ok])
    np.add.at(hits, rows, 1.0)
    filled = hits > 0
    sums[filled] /= hits[filled, None]
    return sums.reshape(grid.ny, grid.nx, 4)


def build_bev_pyramid(base: Tensor, params: ParamSet, prefix: str = "lidar") -> list[Tensor]:
    """Four maps: a per-cell transform of ``base``, then pool-and-transform three times."""
    if base.ndim != 3 or base.shape[0] < 8 or base.shape[1] < 8:
        raise DimensionError(f"BEV base map must be at least 8x8, got {base.shape}")
    levels = []
    x = base
    for level in range(NUM_LEVELS):
        if level:
            x = ad.avg_pool2x2(x)
        h, w, c = x.shape
        weight, bias = params.linear(f"{prefix}.fpn{level}")
        x = ad.linear(x.reshape(h * w, c), weight, bias).reshape(h, w, weight.shape[1])
        levels.append(x)
    return levels


def write_point_dump(path, cloud: PointCloud) -> None:
    """Little-endian: uint32 count, uint32 channels (4), then float32 rows."""
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(pts), 4))
        fh.write(pts.tobytes())


def read_point_dump(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated point dump header")
    count, channels = struct.unpack("<II", raw[:8])
    if channels != 4 or len(raw) != 8 + 16 * count:
        raise InputError(f"{path}: expected {count} x 4 float32 payload")
    pts = np.frombuffer(raw[8:], dtype="<f4").reshape(count, 4).astype(np.float64)
    return PointCloud(pts)
