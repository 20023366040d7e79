"""Line-oriented text files for detections and ground truth.

Each record is one line of space-separated fields::

    sample_id label [score] x y z w l h yaw vx vy

Lines starting with ``#`` are comments; the first line names the file kind.
Floats are written with ``repr`` so a write/read cycle is exact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .boxes import CLASS_NAMES
from .errors import InputError
from .metrics import DetectionRecord, GroundTruthRecord

DET_HEADER = "# msf3d detections v1"
GT_HEADER = "# msf3d ground-truth v1"
BOX_FIELDS = "x y z w l h yaw vx vy"


def _box_values(r: GroundTruthRecord) -> list[float]:
    return [*r.center, *r.size, r.yaw, *r.velocity]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_detections(path, records: Sequence[DetectionRecord]) -> None:
    lines = [DET_HEADER, f"# sample_id label score {BOX_FIELDS}"]
    for r in records:
        lines.append(" ".join([r.sample_id, r.label, _fmt(r.score), *map(_fmt, _box_values(r))]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_ground_truth(path, records: Sequence[GroundTruthRecord]) -> None:
    lines = [GT_HEADER, f"# sample_id label {BOX_FIELDS}"]
    for r in records:
        lines.append(" ".join([r.sample_id, r.label, *map(_fmt, _box_values(r))]))
    Path(path).write_text("\n".join(lines) + "\n")


def _read(path, header: str, with_score: bool):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise InputError(f"{path}: expected first line {header!r}")
    width = 12 if with_score else 11
    out = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != width:
            raise InputError(f"{path}:{no}: expected {width} fields, got {len(parts)}")
        sample_id, label = parts[0], parts[1]
        if label not in CLASS_NAMES:
            raise InputError(f"{path}:{no}: unknown class {label!r}")
        try:
            nums = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise InputError(f"{path}:{no}: {exc}") from exc
        score = None
        if with_score:
            score, nums = nums[0], nums[1:]
        kwargs = dict(center=nums[0:3], size=nums[3:6], yaw=nums[6], velocity=nums[7:9])
        try:
            if with_score:
                out.append(DetectionRecord(sample_id, label, score=score, **kwargs))
            else:
                out.append(GroundTruthRecord(sample_id, label, **kwargs))
        except AssertionError as exc:
            raise InputError(f"{path}:{no}: {exc}") from exc
    return out


def read_detections(path) -> list[DetectionRecord]:
    return _read(path, DET_HEADER, True)


def read_ground_truth(path) -> list[GroundTruthRecord]:
    return _read(path, GT_HEADER, False)
