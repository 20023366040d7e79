"""Oriented 3D boxes and their 10-value regression encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import stable_sigmoid
from .errors import ContractViolation

CLASS_NAMES = (
    "car",
    "truck",
    "trailer",
    "bus",
    "construction_vehicle",
    "bicycle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "barrier",
)

# regression layout: normalized center (3), log size (3), sin yaw, cos yaw, vx, vy
REG_DIM = 10


def wrap_angle(angle: float) -> float:
    """Map an angle into (-pi, pi]; angles already in range come back unchanged."""
    if -math.pi < angle <= math.pi:
        return float(angle)
    a = math.atan2(math.sin(angle), math.cos(angle))
    return math.pi if a == -math.pi else a


@dataclass
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (w, l, h) meters
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    label: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.yaw = wrap_angle(float(self.yaw))
        self.label = int(self.label)
        self.score = float(self.score)
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ContractViolation("Box3D needs a 3-vector center/size and a 2-vector velocity")
        if min(self.size) <= 0:
            raise ContractViolation(f"box sizes must be positive, got {self.size}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]

    def params9(self) -> list[float]:
        return [*self.center, *self.size, self.yaw, *self.velocity]


@dataclass
class DecodedBoxes:
    """Column-wise decoded predictions for N queries."""

    centers: np.ndarray  # (N, 3)
    sizes: np.ndarray  # (N, 3)
    yaws: np.ndarray  # (N,)
    velocities: np.ndarray  # (N, 2)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.centers)

    def box(self, i: int) -> Box3D:
        return Box3D(
            self.centers[i],
            self.sizes[i],
            float(self.yaws[i]),
            self.velocities[i],
            int(self.labels[i]),
            float(self.scores[i]),
        )


def decode_raw(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> DecodedBoxes:
    """Decode (N, 10) raw regression outputs into metric boxes."""
    raw = np.asarray(raw, dtype=np.float64)
    centers = lo + stable_sigmoid(raw[:, 0:3]) * (hi - lo)
    sizes = np.exp(raw[:, 3:6])
    yaws = np.arctan2(raw[:, 6], raw[:, 7])
    yaws = np.where(yaws == -np.pi, np.pi, yaws)
    return DecodedBoxes(centers, sizes, yaws, raw[:, 8:10].copy())


def encode_box(box: Box3D, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Target encoding compared against the prediction encoding in the L1 loss."""
    c = np.asarray(box.center)
    if np.any(c < lo) or np.any(c > hi):
        raise ContractViolation(f"box center {box.center} lies outside the scene bounds")
    return np.concatenate(
        [
            (c - lo) / (hi - lo),
            np.log(np.asarray(box.size)),
            [math.sin(box.yaw), math.cos(box.yaw)],
            box.velocity,
        ]
    )


def raw_from_box(box: Box3D, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_raw` for one box (logit centers, log sizes)."""
    enc = encode_box(box, lo, hi)
    u = np.clip(enc[:3], 1e-12, 1 - 1e-12)
    return np.concatenate([np.log(u) - np.log1p(-u), enc[3:]])
