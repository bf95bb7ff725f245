import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog
from scipy.spatial.transform import Rotation

from dcenav import _kernels
from dcenav.world import (Obstacle, RobotBox, WorldGenConfig, WorldSpec, WorldTooClutteredError,
                          check_collision, generate_world, quat_yaw, sample_start_goal,
                          world_from_text, world_to_text, yaw_matrix)


def _halfspaces(c, R, h):
    # box as A x <= b: +-R[:, k] . (x - c) <= h[k]
    A = np.concatenate([R.T, -R.T])
    b = np.concatenate([h + R.T @ c, h - R.T @ c])
    return A, b


def lp_overlap_margin(c1, R1, h1, c2, R2, h2):
    """Largest s such that a point lies >= s inside both boxes (LP oracle)."""
    A1, b1 = _halfspaces(c1, R1, h1)
    A2, b2 = _halfspaces(c2, R2, h2)
    A = np.concatenate([A1, A2])
    b = np.concatenate([b1, b2])
    A_ub = np.hstack([A, np.ones((len(A), 1))])
    res = linprog(c=[0, 0, 0, -1], A_ub=A_ub, b_ub=b, bounds=[(None, None)] * 3 + [(None, 10)])
    return -res.fun


box_params = st.tuples(
    st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3),
    st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3),
    st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))


@given(box_params, box_params)
def test_obb_overlap_matches_lp_oracle(a, b):
    c1, h1, e1 = (np.array(v) for v in a)
    c2, h2, e2 = (np.array(v) for v in b)
    R1 = Rotation.from_euler("xyz", e1).as_matrix()
    R2 = Rotation.from_euler("xyz", e2).as_matrix()
    margin = lp_overlap_margin(c1, R1, h1, c2, R2, h2)
    if abs(margin) < 1e-6:
        return  # touching: either answer is acceptable
    assert _kernels.obb_overlap(c1, R1, h1, c2, R2, h2) == (margin > 0)


def test_generate_world_is_deterministic_and_counts_obstacles():
    for level in (0, 1, 5, 8, 20):
        a = generate_world(level, seed=3)
        b = generate_world(level, seed=3)
        assert a == b
        assert len(a.obstacles) == level
    assert generate_world(5, seed=1) != generate_world(5, seed=2)


def test_panels_leave_a_robot_sized_gap():
    cfg = WorldGenConfig()
    for seed in range(20):
        w = generate_world(5, cfg, seed)
        L, W, H = w.room_dims
        for ob in w.obstacles:
            c, h = np.array(ob.center), np.array(ob.half_extents)
            gap_y = max(0.5 * W - (c[1] + h[1]), (c[1] - h[1]) + 0.5 * W)
            gap_z = max(0.5 * H - (c[2] + h[2]), (c[2] - h[2]) + 0.5 * H)
            assert max(gap_y, gap_z) >= cfg.min_gap - 1e-9


def test_negative_level_rejected():
    with pytest.raises(ValueError):
        generate_world(-1)


def test_obstacle_validation():
    with pytest.raises(ValueError):
        Obstacle((0, 0, 0), (0.0, 1, 1))
    with pytest.raises(ValueError):
        Obstacle((0, 0, 0), (1, 1, 1), (0, 0, 0, 2))


def test_text_round_trip_exact():
    w = generate_world(12, seed=99)
    assert world_from_text(world_to_text(w)) == w
    with pytest.raises(ValueError):
        world_from_text("garbage\n")


def test_collision_against_walls_and_obstacle():
    room = WorldSpec((10.0, 6.0, 4.0), (Obstacle((2.0, 0.0, 0.0), (0.5, 0.5, 0.5)),), 1, 0)
    ident = (0, 0, 0, 1)
    assert not check_collision(room, (0.0, 0.0, 0.0), ident)
    assert check_collision(room, (2.0, 0.0, 0.0), ident)
    # box half depth 0.215: touching the obstacle face at x = 1.5
    assert not check_collision(room, (1.5 - 0.2151, 0.0, 0.0), ident)
    assert check_collision(room, (1.5 - 0.2149, 0.0, 0.0), ident)
    assert check_collision(room, (4.9, 0.0, 0.0), ident)
    assert not check_collision(room, (4.9, 0.0, 0.0), ident, walls=False)


def test_collision_uses_yaw_only():
    room = WorldSpec((10.0, 6.0, 4.0), (), 0, 0)
    q = Rotation.from_euler("ZYX", [0.3, 0.5, -0.4]).as_quat()
    assert quat_yaw(q) == pytest.approx(0.3)
    np.testing.assert_allclose(yaw_matrix(0.3), Rotation.from_euler("z", 0.3).as_matrix(), atol=1e-12)
    # pitched robot near the floor: a level box still fits
    assert not check_collision(room, (0, 0, -2.0 + 0.13), q)


@pytest.mark.parametrize("level", [0, 3, 5, 10, 20])
def test_start_goal_are_free_and_far_apart(level):
    for seed in range(5):
        w = generate_world(level, seed=seed)
        s, g = sample_start_goal(w, seed)
        assert np.linalg.norm(g - s) >= 0.5 * w.room_dims[0]
        for p in (s, g):
            for yaw in np.linspace(-np.pi, np.pi, 9):
                assert not check_collision(w, p, Rotation.from_euler("z", yaw).as_quat())


def test_start_goal_too_cluttered():
    blocker = Obstacle((0.0, 0.0, 0.0), (20.0, 20.0, 20.0))
    w = WorldSpec((10.0, 6.0, 4.0), (blocker,), 1, 0)
    with pytest.raises(WorldTooClutteredError):
        sample_start_goal(w, 0, max_tries=50)


def test_robot_box_half_extents():
    np.testing.assert_allclose(RobotBox().half_extents, [0.215, 0.215, 0.125])
