"""Camera models, scene extents and the query-to-feature-map sampling path.

Frames: the ego frame is x forward, y left, z up.  Camera frames are x right,
y down, z along the optical axis.  Normalized sampling coordinates are
``(column, row)`` in [0, 1] with the align-corners convention: 0 hits the
first pixel center and 1 the last one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DimensionError

Z_MIN = 0.1  # meters; points closer to the image plane are treated as not visible


@dataclass(frozen=True)
class SceneBounds:
    min: tuple[float, float, float] = (-51.2, -51.2, -5.0)
    max: tuple[float, float, float] = (51.2, 51.2, 3.0)

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(float(v) for v in self.min))
        object.__setattr__(self, "max", tuple(float(v) for v in self.max))
        if len(self.min) != 3 or len(self.max) != 3:
            raise ContractViolation("scene bounds need 3-vectors")
        if any(lo >= hi for lo, hi in zip(self.min, self.max)):
            raise ContractViolation(f"scene bounds min {self.min} must be below max {self.max}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max)

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    cell_size: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if self.cell_size <= 0:
            raise ContractViolation("cell_size must be positive")
        for lo, hi in (self.x_range, self.y_range):
            if hi <= lo:
                raise ContractViolation(f"empty grid range ({lo}, {hi})")
            cells = (hi - lo) / self.cell_size
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ContractViolation(f"range ({lo}, {hi}) is not a multiple of {self.cell_size}")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    def cell_index(self, xy: np.ndarray) -> np.ndarray:
        """floor((p - min) / cell) per axis; a point on a cell edge belongs to the cell it bounds from below."""
        xy = np.asarray(xy, dtype=np.float64)
        ix = np.floor((xy[:, 0] - self.x_range[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.y_range[0]) / self.cell_size).astype(np.int64)
        return np.stack([ix, iy], axis=1)

    def cell_center(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.stack(
            [
                self.x_range[0] + (idx[:, 0] + 0.5) * self.cell_size,
                self.y_range[0] + (idx[:, 1] + 0.5) * self.cell_size,
            ],
            axis=1,
        )


def _check_rotation(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3):
        raise ContractViolation(f"rotation must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9, rtol=0):
        raise ContractViolation("rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
        raise ContractViolation("rotation must have determinant +1")


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with an ego-to-camera rigid transform."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]  # (width, height) pixels

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=np.float64)
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if k.shape != (3, 3) or k[2, 2] != 1.0 or np.any(k[2, :2] != 0) or k[1, 0] != 0:
            raise ContractViolation("intrinsics must be upper triangular with K[2,2] = 1")
        _check_rotation(r)
        if min(self.image_size) <= 0:
            raise ContractViolation(f"image size must be positive, got {self.image_size}")

    @classmethod
    def looking_along(
        cls,
        yaw: float,
        position=(0.0, 0.0, 0.0),
        focal: float = 1000.0,
        image_size=(1600, 900),
        principal_point=None,
    ) -> "CameraModel":
        """A level camera at ``position`` (ego frame) whose optical axis has heading ``yaw``."""
        c, s = math.cos(yaw), math.sin(yaw)
        forward = np.array([c, s, 0.0])
        right = np.array([s, -c, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rotation = np.stack([right, down, forward])
        translation = -rotation @ np.asarray(position, dtype=np.float64)
        w, h = image_size
        cx, cy = principal_point if principal_point is not None else (w / 2.0, h / 2.0)
        k = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        return cls(k, rotation, translation, (w, h))

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def project_pixels(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates, depth and visibility for (N, 3) ego points (numpy only)."""
        pc = self.to_camera(points)
        depth = pc[:, 2]
        front = depth > Z_MIN
        hom = pc @ self.intrinsics.T
        safe = np.where(front, depth, 1.0)
        uv = hom[:, :2] / safe[:, None]
        w, h = self.image_size
        inside = (uv[:, 0] >= 0) & (uv[:, 0] <= w) & (uv[:, 1] >= 0) & (uv[:, 1] <= h)
        return uv, depth, front & inside

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["intrinsics"], d["rotation"], d["translation"], tuple(d["image_size"]))


def camera_rig(
    num_cameras: int,
    image_size=(800, 448),
    fov_deg: float = 70.0,
    position=(0.0, 0.0, 0.0),
) -> list[CameraModel]:
    """``num_cameras`` level cameras evenly spaced in yaw, camera 0 facing +x."""
    if num_cameras < 1:
        raise ContractViolation("a rig needs at least one camera")
    focal = image_size[0] / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    return [
        CameraModel.looking_along(2.0 * math.pi * v / num_cameras, position, focal, image_size)
        for v in range(num_cameras)
    ]


def decode_reference_points(queries: Tensor, weight: Tensor, bias: Tensor, bounds: SceneBounds) -> Tensor:
    """3D reference point per query: bounds.min + sigmoid(q W + b) * span."""
    if weight.shape[-1] != 3:
        raise DimensionError(f"reference-point layer must output 3 values, got {weight.shape}")
    unit = ad.sigmoid(ad.linear(queries, weight, bias))
    return ad.scale_shift(unit, bounds.span, bounds.lo)


def project_to_image(points: Tensor, cam: CameraModel, z_min: float = Z_MIN) -> tuple[Tensor, np.ndarray]:
    """Normalized (u / width, v / height) per point plus a validity mask.

    Invalid rows (behind the camera or outside the image) carry (0, 0).
    """
    n = points.shape[0]
    pc = ad.linear(points, Tensor(cam.rotation.T), Tensor(cam.translation))
    hom = ad.linear(pc, Tensor(cam.intrinsics.T))
    depth = pc.data[:, 2]
    front = depth > z_min
    # behind-camera rows divide by 1 instead of a tiny or negative depth
    keep = front.astype(np.float64)[:, None]
    z = ad.add(ad.mul(hom[:, 2:3], Tensor(keep)), Tensor(1.0 - keep))
    w, h = cam.image_size
    uv = ad.scale_shift(ad.div(hom[:, 0:2], ad.concat([z, z], axis=1)), [1.0 / w, 1.0 / h])
    u = uv.data
    valid = front & (u[:, 0] >= 0) & (u[:, 0] <= 1) & (u[:, 1] >= 0) & (u[:, 1] <= 1)
    mask = np.repeat(valid.astype(np.float64)[:, None], 2, axis=1)
    return ad.mul(uv, Tensor(mask)), valid.reshape(n)


def project_to_bev(points: Tensor, grid: BevGridSpec) -> tuple[Tensor, np.ndarray]:
    """Normalized ground-plane coordinates; z is ignored."""
    (x0, x1), (y0, y1) = grid.x_range, grid.y_range
    xy = ad.scale_shift(points[:, 0:2], [1.0 / (x1 - x0), 1.0 / (y1 - y0)], [-x0 / (x1 - x0), -y0 / (y1 - y0)])
    c = xy.data
    valid = (c[:, 0] >= 0) & (c[:, 0] <= 1) & (c[:, 1] >= 0) & (c[:, 1] <= 1)
    mask = np.repeat(valid.astype(np.float64)[:, None], 2, axis=1)
    return ad.mul(xy, Tensor(mask)), valid


def bilinear_sample(fmap: Tensor, coords: Tensor, valid: np.ndarray) -> Tensor:
    """Sample an (h, w, c) map at n normalized (column, row) coordinates.

    Invalid rows return zero vectors.  Differentiable in both the map and the
    coordinates (piecewise, with kinks on the pixel lattice).
    """
    if fmap.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"bilinear_sample: map {fmap.shape}, coords {coords.shape}")
    f = fmap.data
    h, w, c = f.shape
    valid = np.asarray(valid, dtype=bool)
    if not np.all(np.isfinite(coords.data)):
        raise ContractViolation("bilinear_sample: coordinates must be finite")
    col_raw = coords.data[:, 0] * (w - 1)
    row_raw = coords.data[:, 1] * (h - 1)
    col = np.clip(col_raw, 0, w - 1)
    row = np.clip(row_raw, 0, h - 1)
    x0 = np.clip(np.floor(col).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(row).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (col - x0)[:, None]
    fy = (row - y0)[:, None]
    f00, f01 = f[y0, x0], f[y0, x1]
    f10, f11 = f[y1, x0], f[y1, x1]
    top = f00 + fx * (f01 - f00)
    bottom = f10 + fx * (f11 - f10)
    vm = valid[:, None].astype(np.float64)
    out = (top + fy * (bottom - top)) * vm
    # clamped coordinates have a flat response
    dcol_ok = ((col_raw >= 0) & (col_raw <= w - 1))[:, None] * (w - 1)
    drow_ok = ((row_raw >= 0) & (row_raw <= h - 1))[:, None] * (h - 1)

    def vjp(g):
        g = g * vm
        gmap = np.zeros_like(f)
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for yy, xx, wt in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gmap, (yy, xx), g * wt)
        dfx = (1 - fy) * (f01 - f00) + fy * (f11 - f10)
        dfy = bottom - top
        gc = np.stack(
            [(g * dfx).sum(axis=1) * dcol_ok[:, 0], (g * dfy).sum(axis=1) * drow_ok[:, 0]], axis=1
        )
        return (gmap, gc)

    return ad.apply_op("bilinear_sample", (fmap, coords), out, vjp)
