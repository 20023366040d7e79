"""Deterministic synthetic scenes: boxes, a camera rig, LiDAR returns and image features.

The image features stand in for a pretrained backbone.  Each visible object
leaves a Gaussian blob whose channels carry objectness, normalized depth and
a class code, which is enough signal for the head to learn from.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .boxes import CLASS_NAMES, Box3D
from .errors import ContractViolation, InputError
from .geometry import CameraModel, SceneBounds, camera_rig
from .pointcloud import PointCloud, read_point_dump, write_point_dump

STRIDES = (4, 8, 16, 32)
BLOB_SIGMA = 2.0  # in cells of the level it is drawn on
SCENE_FORMAT = "msf3d-scene"
SCENE_VERSION = 1

# mean (w, l, h) per class, meters
SIZE_PRIORS = {
    "car": (1.9, 4.6, 1.7),
    "truck": (2.5, 6.9, 2.8),
    "trailer": (2.9, 12.0, 3.9),
    "bus": (2.9, 11.0, 3.5),
    "construction_vehicle": (2.8, 6.4, 3.2),
    "bicycle": (0.6, 1.7, 1.3),
    "motorcycle": (0.8, 2.1, 1.5),
    "pedestrian": (0.7, 0.7, 1.8),
    "traffic_cone": (0.4, 0.4, 1.1),
    "barrier": (2.5, 0.5, 1.0),
}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    object_count: tuple[int, int] = (5, 15)  # inclusive range
    class_weights: tuple[float, ...] = (1.0,) * len(CLASS_NAMES)
    bounds: SceneBounds = field(default_factory=SceneBounds)
    # xy box where object centers are drawn; None uses the bounds
    placement: tuple[tuple[float, float], tuple[float, float]] | None = None
    num_cameras: int = 6
    image_size: tuple[int, int] = (800, 448)
    fov_deg: float = 70.0
    points_per_object: int = 200
    ground_points: int = 2000
    noise_sigma: float = 0.02
    ground_z: float = -1.8
    size_jitter: float = 0.1
    velocity_sigma: float = 0.5

    def __post_init__(self):
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ContractViolation(f"object count range {self.object_count} is invalid")
        if len(self.class_weights) != len(CLASS_NAMES) or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise ContractViolation("class_weights needs 10 non-negative entries with a positive sum")
        if self.num_cameras < 1:
            raise ContractViolation("a scene needs at least one camera")
        if self.noise_sigma < 0 or self.points_per_object < 0 or self.ground_points < 0:
            raise ContractViolation("noise sigma and point counts must be non-negative")
        if not self.bounds.min[2] <= self.ground_z <= self.bounds.max[2]:
            raise ContractViolation(f"ground_z {self.ground_z} outside the vertical bounds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = {"min": list(self.bounds.min), "max": list(self.bounds.max)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = SceneBounds(tuple(d["bounds"]["min"]), tuple(d["bounds"]["max"]))
        for key in ("object_count", "class_weights", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("placement") is not None:
            d["placement"] = tuple(tuple(r) for r in d["placement"])
        return cls(**d)


@dataclass
class Scene:
    sample_id: str
    gt: list[Box3D]
    cloud: PointCloud
    cameras: list[CameraModel]
    bounds: SceneBounds = field(default_factory=SceneBounds)


def _sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    lo, hi = spec.object_count
    count = int(rng.integers(lo, hi + 1))
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    labels = rng.choice(len(CLASS_NAMES), size=count, p=weights / weights.sum())
    if spec.placement is None:
        (x0, y0), (x1, y1) = spec.bounds.min[:2], spec.bounds.max[:2]
    else:
        (x0, x1), (y0, y1) = spec.placement
    boxes = []
    for label in labels:
        prior = np.asarray(SIZE_PRIORS[CLASS_NAMES[label]])
        size = prior * (1.0 + spec.size_jitter * rng.uniform(-1.0, 1.0, size=3))
        center = (rng.uniform(x0, x1), rng.uniform(y0, y1), spec.ground_z + size[2] / 2.0)
        yaw = rng.uniform(-math.pi, math.pi)
        velocity = rng.normal(0.0, spec.velocity_sigma, size=2)
        box = Box3D(center, size, yaw, velocity, int(label))
        if not spec.bounds.contains(np.asarray(box.center))[0]:
            raise ContractViolation(f"box {box} left the scene bounds; check placement and ground_z")
        boxes.append(box)
    return boxes


def _rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _face_points(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points on the top and four side faces, area weighted."""
    w, l, h = box.size
    # local frame: x along length, y along width, z up
    areas = np.array([l * w, w * h, w * h, l * h, l * h])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    a = rng.uniform(-0.5, 0.5, size=count)
    b = rng.uniform(-0.5, 0.5, size=count)
    local = np.zeros((count, 3))
    top = face == 0
    local[top] = np.stack([a[top] * l, b[top] * w, np.full(top.sum(), h / 2)], axis=1)
    for f, sign in ((1, 1.0), (2, -1.0)):  # front / back
        m = face == f
        local[m] = np.stack([np.full(m.sum(), sign * l / 2), a[m] * w, b[m] * h], axis=1)
    for f, sign in ((3, 1.0), (4, -1.0)):  # left / right
        m = face == f
        local[m] = np.stack([a[m] * l, np.full(m.sum(), sign * w / 2), b[m] * h], axis=1)
    return local @ _rotation_z(box.yaw).T + np.asarray(box.center)


def simulate_lidar(gt: list[Box3D], spec: SceneSpec, seed: int) -> PointCloud:
    """Object face returns plus a flat ground, stored at float32 precision.

    Intensity is (label + 1) / 10 on objects and 0 on the ground.
    """
    rng = np.random.default_rng([seed, 1])
    chunks = []
    for box in gt:
        xyz = _face_points(box, spec.points_per_object, rng)
        xyz = xyz + rng.normal(0.0, spec.noise_sigma, size=xyz.shape) if spec.noise_sigma else xyz
        inten = np.full((len(xyz), 1), (box.label + 1) / len(CLASS_NAMES))
        chunks.append(np.hstack([xyz, inten]))
    n = spec.ground_points
    lo, hi = spec.bounds.lo, spec.bounds.hi
    ground = np.stack(
        [
            rng.uniform(lo[0], hi[0], size=n),
            rng.uniform(lo[1], hi[1], size=n),
            spec.ground_z + (rng.normal(0.0, spec.noise_sigma, size=n) if spec.noise_sigma else np.zeros(n)),
            np.zeros(n),
        ],
        axis=1,
    )
    chunks.append(ground)
    pts = np.vstack(chunks).astype(np.float32).astype(np.float64)
    return PointCloud(pts)


def generate_scene(spec: SceneSpec, seed: int | None = None) -> Scene:
    """A pure function of (spec, seed); ``seed`` defaults to ``spec.seed``."""
    seed = spec.seed if seed is None else int(seed)
    gt = _sample_boxes(spec, np.random.default_rng([seed, 0]))
    cloud = simulate_lidar(gt, spec, seed)
    cameras = camera_rig(spec.num_cameras, spec.image_size, spec.fov_deg)
    return Scene(f"scene-{seed:06d}", gt, cloud, cameras, spec.bounds)


def level_extents(image_size: tuple[int, int]) -> list[tuple[int, int]]:
    """(rows, cols) of each pyramid level for a (width, height) image."""
    w, h = image_size
    return [(math.ceil(h / s), math.ceil(w / s)) for s in STRIDES]


def class_code(label: int, channels: int) -> np.ndarray:
    """Unit-free code for a class over ``channels`` slots: cos/sin pairs at rising frequency."""
    theta = 2.0 * math.pi * label / len(CLASS_NAMES)
    code = np.zeros(channels)
    for j in range(channels // 2):
        code[2 * j] = math.cos((j + 1) * theta)
        code[2 * j + 1] = math.sin((j + 1) * theta)
    return code


def synthesize_image_pyramids(scene: Scene, channels: int) -> list[list[np.ndarray]]:
    """Per camera, four (rows, cols, channels) maps at strides 4, 8, 16 and 32.

    Channel 0 is objectness, 1 is depth over the scene radius, the rest a
    class code, all scaled by the blob.
    """
    if channels < 4:
        raise ContractViolation(f"image features need at least 4 channels, got {channels}")
    radius = float(np.hypot(*np.abs(np.vstack([scene.bounds.lo[:2], scene.bounds.hi[:2]])).max(axis=0)))
    pyramids = []
    for cam in scene.cameras:
        w, h = cam.image_size
        levels = [np.zeros((rows, cols, channels)) for rows, cols in level_extents(cam.image_size)]
        if scene.gt:
            centers = np.array([b.center for b in scene.gt])
            uv, depth, visible = cam.project_pixels(centers)
            for i in np.nonzero(visible)[0]:
                box = scene.gt[i]
                pattern = np.concatenate([[1.0, depth[i] / radius], class_code(box.label, channels - 2)])
                for fmap in levels:
                    rows, cols = fmap.shape[:2]
                    col = uv[i, 0] / w * (cols - 1)
                    row = uv[i, 1] / h * (rows - 1)
                    gy = np.exp(-((np.arange(rows) - row) ** 2) / (2 * BLOB_SIGMA**2))
                    gx = np.exp(-((np.arange(cols) - col) ** 2) / (2 * BLOB_SIGMA**2))
                    fmap += np.outer(gy, gx)[:, :, None] * pattern
        pyramids.append(levels)
    return pyramids


def pyramids_as_tensors(pyramids: list[list[np.ndarray]]) -> list[list[Tensor]]:
    return [[Tensor(level) for level in pyr] for pyr in pyramids]


def save_scene(scene: Scene, path) -> None:
    """JSON document plus a sibling ``<stem>.points.bin`` point dump."""
    path = Path(path)
    points_name = path.with_suffix("").name + ".points.bin"
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "sample_id": scene.sample_id,
        "bounds": {"min": list(scene.bounds.min), "max": list(scene.bounds.max)},
        "cameras": [cam.to_dict() for cam in scene.cameras],
        "boxes": [
            {
                "label": CLASS_NAMES[b.label],
                "center": list(b.center),
                "size": list(b.size),
                "yaw": b.yaw,
                "velocity": list(b.velocity),
            }
            for b in scene.gt
        ],
        "points": points_name,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_point_dump(path.parent / points_name, scene.cloud)


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: cannot read scene file ({exc})") from exc
    if doc.get("format") != SCENE_FORMAT or doc.get("version") != SCENE_VERSION:
        raise InputError(f"{path}: not a version {SCENE_VERSION} scene file")
    try:
        bounds = SceneBounds(tuple(doc["bounds"]["min"]), tuple(doc["bounds"]["max"]))
        cameras = [CameraModel.from_dict(c) for c in doc["cameras"]]
        gt = [
            Box3D(b["center"], b["size"], b["yaw"], b["velocity"], CLASS_NAMES.index(b["label"]))
            for b in doc["boxes"]
        ]
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: malformed scene ({exc})") from exc
    cloud = read_point_dump(path.parent / doc["points"])
    return Scene(doc["sample_id"], gt, cloud, cameras, bounds)
