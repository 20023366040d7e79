import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msf3d import autodiff as ad
from msf3d.autodiff import Parameter, Tape, Tensor
from msf3d.errors import ContractViolation
from msf3d.geometry import (
    BevGridSpec,
    CameraModel,
    SceneBounds,
    bilinear_sample,
    camera_rig,
    decode_reference_points,
    project_to_bev,
    project_to_image,
)


def test_point_on_axis_projects_to_principal_point():
    cam = CameraModel.looking_along(0.0, focal=500.0, image_size=(800, 400))
    coords, valid = project_to_image(Tensor([[10.0, 0.0, 0.0]]), cam)
    assert valid[0]
    np.testing.assert_allclose(coords.data[0], [0.5, 0.5], atol=1e-15)


def test_point_behind_camera_is_invalid_and_zeroed():
    cam = CameraModel.looking_along(0.0)
    coords, valid = project_to_image(Tensor([[-5.0, 1.0, 0.0], [0.05, 0.0, 0.0]]), cam)
    assert not valid.any()
    assert np.all(coords.data == 0.0)


def test_projection_matches_pinhole_oracle():
    rng = np.random.default_rng(1)
    cam = camera_rig(6)[2]
    pts = rng.uniform(-30, 30, size=(200, 3))
    coords, valid = project_to_image(Tensor(pts), cam)
    pc = (cam.rotation @ pts.T).T + cam.translation
    w, h = cam.image_size
    for i in range(len(pts)):
        x, y, z = pc[i]
        if z <= 0.1:
            assert not valid[i]
            continue
        u = (cam.intrinsics[0, 0] * x + cam.intrinsics[0, 2] * z) / z / w
        v = (cam.intrinsics[1, 1] * y + cam.intrinsics[1, 2] * z) / z / h
        inside = 0 <= u <= 1 and 0 <= v <= 1
        assert valid[i] == inside
        if inside:
            np.testing.assert_allclose(coords.data[i], [u, v], rtol=1e-12)


def test_camera_rejects_reflection():
    with pytest.raises(ContractViolation):
        CameraModel(np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), (10, 10))


def test_camera_dict_round_trip():
    cam = camera_rig(3)[1]
    back = CameraModel.from_dict(cam.to_dict())
    assert np.array_equal(back.rotation, cam.rotation) and back.image_size == cam.image_size


def test_bilinear_hits_pixel_centers_at_corners():
    fmap = np.arange(12.0).reshape(3, 4, 1)
    coords = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    out = bilinear_sample(Tensor(fmap), Tensor(coords), np.ones(4, bool)).data[:, 0]
    np.testing.assert_allclose(out, [0.0, 11.0, 3.0, (5.0 + 6.0) / 2])


@given(st.floats(0, 1), st.floats(0, 1))
def test_bilinear_reproduces_affine_maps_exactly(cx, cy):
    h, w = 5, 7
    rows, cols = np.mgrid[0:h, 0:w]
    fmap = (2.0 * cols - 3.0 * rows + 1.0)[:, :, None]
    out = bilinear_sample(Tensor(fmap), Tensor([[cx, cy]]), np.array([True])).data[0, 0]
    assert out == pytest.approx(2.0 * cx * (w - 1) - 3.0 * cy * (h - 1) + 1.0, abs=1e-9)


def test_bilinear_invalid_rows_get_zero_and_no_gradient():
    fmap = Parameter("f", np.ones((4, 4, 2)))
    coords = Parameter("c", [[0.3, 0.3], [0.6, 0.6]])
    with Tape() as tape:
        out = bilinear_sample(fmap, coords, np.array([True, False]))
        loss = ad.sum_(out)
    assert np.all(out.data[1] == 0)
    assert tape.backward(loss)[fmap].sum() == pytest.approx(2.0)


def test_reference_points_stay_inside_bounds():
    rng = np.random.default_rng(0)
    b = SceneBounds((-10, -20, -3), (10, 20, 1))
    ref = decode_reference_points(Tensor(rng.normal(size=(50, 8)) * 10), Tensor(rng.normal(size=(8, 3))), Tensor(np.zeros(3)), b).data
    assert np.all(ref >= b.lo) and np.all(ref <= b.hi)


def test_bev_projection_normalizes_grid_extent():
    grid = BevGridSpec((-10.0, 10.0), (-5.0, 5.0), 0.5)
    coords, valid = project_to_bev(Tensor([[0.0, 0.0, 2.0], [10.0, -5.0, 0.0], [11.0, 0.0, 0.0]]), grid)
    np.testing.assert_allclose(coords.data[:2], [[0.5, 0.5], [1.0, 0.0]])
    assert list(valid) == [True, True, False]


def test_grid_cell_index_floor_convention():
    grid = BevGridSpec((-1.0, 1.0), (-1.0, 1.0), 0.5)
    idx = grid.cell_index(np.array([[-1.0, -1.0], [0.0, 0.49], [0.99, 0.5]]))
    np.testing.assert_array_equal(idx, [[0, 0], [2, 2], [3, 3]])
    assert (grid.nx, grid.ny) == (4, 4)


def test_grid_rejects_non_divisible_range():
    with pytest.raises(ContractViolation):
        BevGridSpec((0.0, 1.0), (0.0, 1.0), 0.3)


def test_rig_cameras_are_evenly_spaced():
    rig = camera_rig(4)
    axes = [cam.rotation[2] for cam in rig]
    for v, axis in enumerate(axes):
        yaw = 2 * math.pi * v / 4
        np.testing.assert_allclose(axis, [math.cos(yaw), math.sin(yaw), 0.0], atol=1e-12)
