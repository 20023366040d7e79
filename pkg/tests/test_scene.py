import math

import numpy as np
import pytest

from msf3d.boxes import Box3D
from msf3d.errors import ContractViolation, InputError
from msf3d.geometry import CameraModel, SceneBounds
from msf3d.scene import (
    BLOB_SIGMA,
    Scene,
    SceneSpec,
    class_code,
    generate_scene,
    level_extents,
    load_scene,
    save_scene,
    simulate_lidar,
    synthesize_image_pyramids,
)
from msf3d.pointcloud import PointCloud


def test_empty_scene_is_ground_only():
    spec = SceneSpec(object_count=(0, 0), ground_points=300)
    s = generate_scene(spec, 1)
    assert s.gt == [] and len(s.cloud) == 300
    assert np.all(s.cloud.points[:, 3] == 0)
    assert all(np.all(l == 0) for pyr in synthesize_image_pyramids(s, 6) for l in pyr)


def test_same_seed_same_scene():
    spec = SceneSpec()
    a, b = generate_scene(spec, 42), generate_scene(spec, 42)
    assert a.gt == b.gt and np.array_equal(a.cloud.points, b.cloud.points)
    for pa, pb in zip(synthesize_image_pyramids(a, 8), synthesize_image_pyramids(b, 8)):
        assert all(np.array_equal(x, y) for x, y in zip(pa, pb))
    assert generate_scene(spec, 43).gt != a.gt


def test_point_count_is_exact():
    spec = SceneSpec(object_count=(3, 9), points_per_object=57, ground_points=123)
    for seed in range(5):
        s = generate_scene(spec, seed)
        assert len(s.cloud) == 57 * len(s.gt) + 123


def test_centers_are_uniform_chi_square():
    spec = SceneSpec(object_count=(1000, 1000), points_per_object=0, ground_points=0)
    s = generate_scene(spec, 3)
    xy = np.array([b.center[:2] for b in s.gt])
    lo, hi = spec.bounds.lo[:2], spec.bounds.hi[:2]
    counts, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], bins=5, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    expected = 1000 / 25
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 52.6  # 99.9th percentile of chi-square with 24 dof
    assert all(spec.bounds.contains(np.array(b.center))[0] for b in s.gt)


def _face_distance(points, box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = (points[:, :3] - np.asarray(box.center)) @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    half = np.array([box.size[1], box.size[0], box.size[2]]) / 2
    gaps = np.abs(np.abs(local) - half)
    inside = np.all(np.abs(local) <= half + 1e-9, axis=1)
    return np.where(inside, gaps.min(axis=1), np.inf)


def test_noise_free_points_lie_on_faces():
    box = Box3D((0.0, 0.0, 0.5), (1.0, 1.0, 1.0), 0.0, (0, 0), 0)
    spec = SceneSpec(noise_sigma=0.0, points_per_object=500, ground_points=0)
    cloud = simulate_lidar([box], spec, 0)
    assert np.max(_face_distance(cloud.points, box)) < 1e-6  # float32 storage
    pts = cloud.points
    on_bottom = (np.abs(pts[:, 2]) < 1e-6) & np.all(np.abs(pts[:, :2]) < 0.49, axis=1)
    assert not on_bottom.any()


def test_noisy_points_stay_close():
    box = Box3D((3.0, -2.0, 0.0), (2.0, 4.5, 1.6), 0.7, (0, 0), 3)
    spec = SceneSpec(noise_sigma=0.01, points_per_object=4000, ground_points=0)
    pts = simulate_lidar([box], spec, 5).points
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = (pts[:, :3] - np.asarray(box.center)) @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    half = np.array([box.size[1], box.size[0], box.size[2]]) / 2
    outside = np.maximum(np.abs(local) - half, 0)
    surface = np.where(np.all(np.abs(local) < half, axis=1), np.abs(np.abs(local) - half).min(axis=1), np.linalg.norm(outside, axis=1))
    assert np.mean(surface < 0.03) >= 0.99
    np.testing.assert_allclose(pts[:, 3], 0.4, atol=1e-7)


def test_pyramid_extents_follow_strides():
    s = generate_scene(SceneSpec(image_size=(801, 450), num_cameras=2), 0)
    pyr = synthesize_image_pyramids(s, 5)
    assert [l.shape[:2] for l in pyr[0]] == level_extents((801, 450)) == [(113, 201), (57, 101), (29, 51), (15, 26)]


def _one_object_scene(center, cams):
    box = Box3D(center, (2.0, 4.0, 1.5), 0.0, (0, 0), 4)
    return Scene("one", [box], PointCloud(np.zeros((0, 4))), cams, SceneBounds())


def test_object_behind_camera_leaves_no_blob():
    cam = CameraModel.looking_along(0.0, focal=400.0, image_size=(640, 320))
    pyr = synthesize_image_pyramids(_one_object_scene((-10.0, 0.0, 0.0), [cam]), 4)
    assert all(np.all(l == 0) for l in pyr[0])


def test_on_axis_blob_peaks_at_principal_point_cell_with_constant_mass():
    # large enough that the coarsest level does not clip the blob tails
    cam = CameraModel.looking_along(0.0, focal=800.0, image_size=(1280, 640))
    pyr = synthesize_image_pyramids(_one_object_scene((15.0, 0.0, 0.0), [cam]), 4)[0]
    masses = []
    for l in pyr:
        rows, cols = l.shape[:2]
        peak = np.unravel_index(np.argmax(l[:, :, 0]), (rows, cols))
        assert abs(peak[0] - 0.5 * (rows - 1)) <= 0.5 and abs(peak[1] - 0.5 * (cols - 1)) <= 0.5
        masses.append(l[:, :, 0].sum())
    np.testing.assert_allclose(masses, 2 * math.pi * BLOB_SIGMA**2, rtol=0.01)
    top = pyr[0][np.unravel_index(np.argmax(pyr[0][:, :, 0]), pyr[0].shape[:2])]
    np.testing.assert_allclose(top[2:] / top[0], class_code(4, 2), atol=1e-12)


def test_class_codes_are_distinct():
    for c in (2, 3, 6):
        codes = np.array([class_code(k, c) for k in range(10)])
        d = np.linalg.norm(codes[:, None] - codes[None], axis=2)
        assert np.all(d[~np.eye(10, dtype=bool)] > 1e-3)


def test_spec_validation_and_channels():
    with pytest.raises(ContractViolation):
        SceneSpec(object_count=(3, 1))
    with pytest.raises(ContractViolation):
        SceneSpec(num_cameras=0)
    with pytest.raises(ContractViolation):
        synthesize_image_pyramids(generate_scene(SceneSpec(), 0), 3)
    with pytest.raises(InputError):
        SceneSpec.from_dict({"seeds": 3})
    spec = SceneSpec(placement=((1.0, 2.0), (3.0, 4.0)))
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_scene_file_round_trip(tmp_path):
    s = generate_scene(SceneSpec(num_cameras=2), 9)
    save_scene(s, tmp_path / "x.json")
    back = load_scene(tmp_path / "x.json")
    assert back.gt == s.gt and back.sample_id == s.sample_id
    assert np.array_equal(back.cloud.points, s.cloud.points)
    assert all(np.array_equal(a.rotation, b.rotation) for a, b in zip(back.cameras, s.cameras))
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(InputError):
        load_scene(tmp_path / "bad.json")
