import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcenav.camera import CameraIntrinsics, SensorNoiseParams, apply_sensor_noise, render_depth
from dcenav.collision_image import (collision_image, collision_image_naive, valid_mask,
                                    window_radii)
from dcenav.world import RobotBox, generate_world, sample_start_goal

INTR = CameraIntrinsics(64, 48)
ROBOT = RobotBox()


def test_constant_image_shifts_by_half_depth():
    img = np.full((48, 64), 4.0, dtype=np.float32)
    out = collision_image(img, INTR, ROBOT)
    np.testing.assert_array_equal(out, np.float32(4.0) - np.float32(0.215))


def test_near_pixel_spreads_by_its_footprint():
    img = np.full((48, 64), 9.0, dtype=np.float32)
    img[20, 30] = 1.0
    out = collision_image(img, INTR, ROBOT)
    # far pixels have footprint floor(f * 0.215 / 9) = 1 (x) and floor(fy*0.125/9) = 0 (y)
    rx_far = int(np.floor(INTR.fx * 0.215 / 9.0))
    ry_far = int(np.floor(INTR.fy * 0.125 / 9.0))
    near = np.argwhere(out < 5.0)
    expected = {(20 + dy, 30 + dx) for dy in range(-ry_far, ry_far + 1)
                for dx in range(-rx_far, rx_far + 1)}
    assert {tuple(p) for p in near} == expected
    assert out[20, 30] == np.float32(1.0) - np.float32(0.215)


def test_footprint_radii_formula():
    img = np.array([[2.0, 0.0]], dtype=np.float32)
    ry, rx = window_radii(img, INTR, ROBOT)
    assert rx[0, 0] == min(int(np.floor(INTR.fx * 0.215 / 2.0)), 2)
    assert rx[0, 1] == int(np.floor(INTR.fx * 0.215 / INTR.max_range))
    assert ry[0, 0] == min(int(np.floor(INTR.fy * 0.125 / 2.0)), 1)


def test_invalid_pixels_never_contribute():
    img = np.full((48, 64), 5.0, dtype=np.float32)
    img[10:20, 10:20] = 0.0
    out = collision_image(img, INTR, ROBOT)
    assert np.all(out[out > 0] >= np.float32(5.0) - np.float32(0.215))
    # the hole's interior stays invalid only where the whole footprint is invalid
    assert out[15, 15] == 0.0
    assert np.all(valid_mask(out) | ~valid_mask(img))


def test_fully_invalid_image_stays_invalid():
    out = collision_image(np.zeros((48, 64), np.float32), INTR, ROBOT)
    assert np.all(out == 0.0)


def test_output_clamped_to_min_range():
    img = np.full((48, 64), 0.3, dtype=np.float32)
    assert np.all(collision_image(img, INTR, ROBOT) == np.float32(INTR.min_range))


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_fast_equals_naive_on_random_images(seed, p_invalid):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.2, 10.0, (24, 32)).astype(np.float32)
    img[rng.random(img.shape) < p_invalid] = 0.0
    intr = CameraIntrinsics(32, 24)
    np.testing.assert_array_equal(collision_image(img, intr, ROBOT),
                                  collision_image_naive(img, intr, ROBOT))


def test_fast_equals_naive_on_rendered_scene():
    w = generate_world(10, seed=4)
    s, _ = sample_start_goal(w, 4)
    img = apply_sensor_noise(render_depth(w, s, (0, 0, 0, 1), INTR), SensorNoiseParams(), 1, INTR)
    np.testing.assert_array_equal(collision_image(img, INTR, ROBOT),
                                  collision_image_naive(img, INTR, ROBOT))


def test_batch_matches_single_and_naive_toggle():
    rng = np.random.default_rng(0)
    imgs = rng.uniform(0.2, 10.0, (3, 48, 64)).astype(np.float32)
    batch = collision_image(imgs, INTR, ROBOT)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], collision_image(imgs[i], INTR, ROBOT))
    np.testing.assert_array_equal(batch, collision_image(imgs, INTR, ROBOT, naive=True))


def test_output_never_exceeds_input_minus_offset():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 10.0, (48, 64)).astype(np.float32)
    out = collision_image(img, INTR, ROBOT)
    assert np.all(out <= np.maximum(img - np.float32(0.215), np.float32(INTR.min_range)))


@pytest.mark.parametrize("offset", [0.0, 0.5])
def test_depth_offset_override(offset):
    img = np.full((48, 64), 4.0, dtype=np.float32)
    np.testing.assert_array_equal(collision_image(img, INTR, ROBOT, depth_offset=offset),
                                  np.float32(4.0) - np.float32(offset))
