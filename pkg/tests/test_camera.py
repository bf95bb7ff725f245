import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from dcenav.camera import (CameraIntrinsics, SensorNoiseParams, apply_sensor_noise,
                           perturb_camera_mount, read_depth_png, read_raster, render_depth,
                           resize_depth, write_depth_png, write_raster)
from dcenav.world import Obstacle, WorldSpec

IDENT = np.array([0.0, 0.0, 0.0, 1.0])


def test_intrinsics_focal_lengths():
    intr = CameraIntrinsics(160, 120, 87.0, 58.0)
    assert intr.fx == pytest.approx(80.0 / np.tan(np.radians(43.5)))
    assert intr.fy == pytest.approx(60.0 / np.tan(np.radians(29.0)))
    assert CameraIntrinsics(vertical_fov=None).fy == CameraIntrinsics().fx
    with pytest.raises(ValueError):
        CameraIntrinsics(min_range=5, max_range=1)


def test_ray_directions_have_unit_forward_component():
    d = CameraIntrinsics(8, 6).ray_directions()
    assert d.shape == (48, 3)
    np.testing.assert_array_equal(d[:, 0], 1.0)
    # first pixel is top-left: looks left (+y) and up (+z)
    assert d[0, 1] > 0 and d[0, 2] > 0


def test_front_wall_gives_constant_z_depth():
    intr = CameraIntrinsics(32, 24, 60.0, 45.0, max_range=20.0)
    w = WorldSpec((10.0, 20.0, 20.0), (), 0, 0)
    img = render_depth(w, (1.0, 0.0, 0.0), IDENT, intr)
    np.testing.assert_allclose(img, 4.0, rtol=1e-6)


def test_facing_box_matches_closed_form():
    intr = CameraIntrinsics(64, 48)
    box = Obstacle((3.0, 0.4, -0.2), (0.5, 0.7, 0.5))
    w = WorldSpec((100.0, 100.0, 100.0), (box,), 1, 0)
    img = render_depth(w, (0.0, 0.0, 0.0), IDENT, intr, walls=False)
    d = intr.ray_directions()
    face = 2.5
    y, z = d[:, 1] * face, d[:, 2] * face
    hit = (np.abs(y - 0.4) < 0.7) & (np.abs(z + 0.2) < 0.5)
    expected = np.where(hit, face, intr.max_range).reshape(48, 64)
    edge = (np.abs(np.abs(y - 0.4) - 0.7) < 1e-3) | (np.abs(np.abs(z + 0.2) - 0.5) < 1e-3)
    ok = ~edge.reshape(48, 64)
    np.testing.assert_allclose(img[ok], expected[ok], rtol=1e-6)


def _march(origin, direction, world, step=1e-4, t_max=10.0):
    centers, rots, halves = world.obstacle_arrays()
    ts = np.arange(0.0, t_max, step)
    pts = origin + ts[:, None] * direction
    inside = np.zeros(len(ts), dtype=bool)
    for c, R, h in zip(centers, rots, halves):
        local = (pts - c) @ R
        inside |= np.all(np.abs(local) <= h, axis=1)
    hits = np.flatnonzero(inside)
    return ts[hits[0]] if hits.size else None


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=8)
def test_rotated_boxes_match_ray_marching(seed):
    rng = np.random.default_rng(seed)
    obs = tuple(Obstacle(tuple(rng.uniform([2, -2, -1], [6, 2, 1])), tuple(rng.uniform(0.2, 0.8, 3)),
                         tuple(Rotation.random(random_state=rng).as_quat())) for _ in range(3))
    w = WorldSpec((100.0, 100.0, 100.0), obs, 3, 0)
    intr = CameraIntrinsics(12, 9)
    img = render_depth(w, (0.0, 0.0, 0.0), IDENT, intr, walls=False).ravel()
    for i, d in enumerate(intr.ray_directions()):
        t = _march(np.zeros(3), d, w)
        if t is None or t >= intr.max_range:
            assert img[i] == intr.max_range
        else:
            assert img[i] == pytest.approx(t, abs=1e-3)


def test_camera_inside_obstacle_sees_through_own_box_and_near_is_invalid():
    intr = CameraIntrinsics(8, 6, min_range=0.5)
    w = WorldSpec((100.0, 100.0, 100.0), (Obstacle((0.3, 0, 0), (0.05, 5, 5)),), 1, 0)
    img = render_depth(w, (0.0, 0.0, 0.0), IDENT, intr, walls=False)
    assert np.all(img == 0.0)


def test_render_rotated_camera():
    intr = CameraIntrinsics(16, 12)
    w = WorldSpec((10.0, 10.0, 10.0), (), 0, 0)
    q = Rotation.from_euler("z", np.pi / 2).as_quat()  # looking along +y
    img = render_depth(w, (0.0, 1.0, 0.0), q, intr)
    np.testing.assert_allclose(img, 4.0, rtol=1e-6)


def test_noise_std_matches_model():
    params = SensorNoiseParams(0.01, 0.004, 0.0)
    img = np.full((400, 400), 5.0, dtype=np.float32)
    noisy = apply_sensor_noise(img, params, seed=1)
    expected = 0.01 + 0.004 * 5.0
    assert np.std(noisy - img) == pytest.approx(expected, rel=0.05)
    assert abs(np.mean(noisy - img)) < 3 * expected / 400


def test_noise_dropout_rate_and_invalid_preserved():
    img = np.full((300, 300), 3.0, dtype=np.float32)
    img[:10] = 0.0
    out = apply_sensor_noise(img, SensorNoiseParams(0.0, 0.0, 0.1), seed=2)
    assert np.all(out[:10] == 0.0)
    assert np.mean(out[10:] == 0.0) == pytest.approx(0.1, abs=0.01)
    assert np.array_equal(apply_sensor_noise(img, SensorNoiseParams(), 5),
                          apply_sensor_noise(img, SensorNoiseParams(), 5))


def test_noise_stays_in_range():
    intr = CameraIntrinsics()
    img = np.full((50, 50), 9.99, dtype=np.float32)
    out = apply_sensor_noise(img, SensorNoiseParams(0.5, 0.0, 0.0), 0, intr)
    assert out.max() <= intr.max_range and out[out > 0].min() >= intr.min_range


def test_mount_perturbation_bounded():
    for s in range(20):
        pos, q = perturb_camera_mount(np.zeros(3), IDENT, s)
        assert np.all(np.abs(pos) <= 0.05)
        angle = Rotation.from_quat(q).magnitude()
        assert np.degrees(angle) <= 3.0 * np.sqrt(3) + 1e-9


def test_raster_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 10, (7, 5)).astype(np.float32)
    write_raster(tmp_path / "a.f32", img)
    np.testing.assert_array_equal(read_raster(tmp_path / "a.f32"), img)
    (tmp_path / "bad").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        read_raster(tmp_path / "bad")


def test_depth_png_round_trip(tmp_path):
    img = np.array([[0.0, 1.234], [5.0, 12.0]], dtype=np.float32)
    write_depth_png(tmp_path / "d.png", img)
    back = read_depth_png(tmp_path / "d.png")
    np.testing.assert_allclose(back, [[0.0, 1.234], [5.0, 10.0]], atol=1e-6)


def test_resize_keeps_invalid_pixels_unblended():
    img = np.array([[0.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    out = resize_depth(img, 4, 4)
    assert set(np.unique(out)) <= {0.0, 2.0, 3.0, 4.0}
    assert out[0, 0] == 0.0 and out[3, 3] == 4.0
