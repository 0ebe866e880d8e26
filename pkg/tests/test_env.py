import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memplan.env import (
    AgentState, GridMaze, GridMazeSpec, InvalidActionError, Lifting, PointMass, PointMassSpec,
    clover_maze, geodesic_oracle, make_env, obs_equality_tolerance, observe, open_grid, random_walk, step,
)


@pytest.fixture(scope="module")
def grid5():
    return GridMaze(open_grid(5))


def test_unobstructed_move_north(grid5):
    s, collided = step(grid5, AgentState((2, 2)), 0)
    assert s.pose == (2, 3) and not collided


def test_move_into_wall_is_identity():
    m = GridMaze(GridMazeSpec(5, 5, frozenset({(3, 2)})))
    s, collided = m.step(AgentState((2, 2)), 1)
    assert s.pose == (2, 2) and collided
    s, collided = m.step(AgentState((0, 0)), 3)
    assert s.pose == (0, 0) and collided


@pytest.mark.parametrize("bad", [4, -1, 1.5, "N", True])
def test_malformed_action_rejected(grid5, bad):
    with pytest.raises(InvalidActionError):
        grid5.step(AgentState((2, 2)), bad)


def test_point_mass_single_euler_step():
    pm = PointMass(PointMassSpec(dt=0.1, accel_max=2.0, vel_max=5.0))
    s, collided = pm.step(AgentState((5.0, 5.0), (0.0, 0.0)), (2.0, 0.0))
    assert s.vel == pytest.approx((0.2, 0.0))
    assert s.pose == pytest.approx((5.0 + 0.2 * 0.1, 5.0))
    assert not collided


def test_point_mass_wall_stops_normal_velocity():
    pm = PointMass(PointMassSpec(walls=(((5.05, 0.0), (5.05, 10.0)),), dt=0.1, accel_max=1.0, vel_max=5.0))
    s, collided = pm.step(AgentState((5.0, 5.0), (1.0, 1.0)), 0)
    assert collided
    assert s.pose[0] == 5.0 and s.vel[0] == 0.0
    assert s.vel[1] == pytest.approx(1.0) and s.pose[1] > 5.0


def test_point_mass_rejects_excess_acceleration():
    pm = PointMass(PointMassSpec())
    with pytest.raises(InvalidActionError):
        pm.step(AgentState((1.0, 1.0)), (5.0, 0.0))


def test_observe_identity():
    m = GridMaze(open_grid(4))
    assert observe(m, AgentState((3, 1))).tolist() == [3.0, 1.0]


def test_observe_onehot():
    m = GridMaze(open_grid(4), Lifting("onehot", grid_shape=(4, 4)))
    o = m.observe(AgentState((0, 0)))
    assert o.shape == (16,) and o[0] == 1.0 and o.sum() == 1.0


def test_observe_random_is_deterministic():
    m = make_env("open", 6, obs_mode="random", obs_dim=64, seed=3)
    a = m.observe(AgentState((2, 4)))
    b = m.observe(AgentState((2, 4)))
    assert a.shape == (64,) and np.array_equal(a, b)
    assert np.all(np.isfinite(a))


@pytest.mark.parametrize("mode", ["identity", "onehot", "random"])
def test_observe_injective_on_free_cells(mode):
    m = make_env("clover", 12, obs_mode=mode, obs_dim=32, seed=1)
    obs = m.lifting(np.asarray(m.free_cells, dtype=float))
    assert len({o.tobytes() for o in obs}) == m.n_cells
    assert obs_equality_tolerance(m) > 0


def test_random_walk_single_step(grid5):
    log = random_walk(grid5, 1, seed=0)
    assert log.total_steps == 1 and log.n_states == 2


def test_random_walk_reproducible():
    m = make_env("open", 10, obs_mode="identity")
    a = m.random_walk(300_000, seed=4)
    b = m.random_walk(300_000, seed=4)
    assert a == b
    assert a.n_episodes == 1


def test_random_walk_is_contiguous_and_obeys_dynamics():
    m = make_env("clover", 12, obs_mode="identity", seed=2)
    log = m.random_walk(500, seed=1)
    poses, acts = log.poses, log.actions
    for t in range(log.total_steps):
        nxt, _ = m.step(m.state_from_pose(poses[t]), int(acts[t]))
        assert nxt.pose == tuple(int(v) for v in poses[t + 1])
    ts = list(log.transitions(0))
    assert all(np.array_equal(ts[k].next_obs, ts[k + 1].obs) for k in range(len(ts) - 1))


def test_clover_walk_visits_every_free_cell():
    # seed 0 passes at 50k steps on the 20x20 clover maze
    m = make_env("clover", 20, obstacle_density=0.05, obs_mode="identity", seed=0)
    log = m.random_walk(50_000, seed=0)
    visited = {tuple(int(v) for v in p) for p in log.poses}
    assert visited == set(m.free_cells)


def test_clover_is_connected_and_has_wedges():
    m = GridMaze(clover_maze(20, 0.05, seed=0))
    assert m.n_components() == 1
    bare = GridMaze(clover_maze(20, 0.0, seed=0))
    assert bare.n_cells - m.n_cells == round(0.05 * bare.n_cells)
    d = m.distances
    pts = np.asarray(m.free_cells)
    eu = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    assert np.any((eu <= 3.5) & (d >= 9))


def test_geodesic_oracle_basics(grid5):
    assert geodesic_oracle(grid5, AgentState((1, 1)), AgentState((1, 1))) == 0
    assert geodesic_oracle(grid5, AgentState((1, 1)), AgentState((1, 2))) == 1
    split = GridMaze(GridMazeSpec(5, 5, frozenset((2, y) for y in range(5))), check_connected=False)
    assert geodesic_oracle(split, AgentState((0, 0)), AgentState((4, 4))) is None


def test_disconnected_maze_rejected_by_default():
    with pytest.raises(ValueError):
        GridMaze(GridMazeSpec(5, 5, frozenset((2, y) for y in range(5))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_geodesic_symmetry(i, j):
    m = _clover_small()
    a, b = m.free_cells[i % m.n_cells], m.free_cells[j % m.n_cells]
    assert m.geodesic(AgentState(a), AgentState(b)) == m.geodesic(AgentState(b), AgentState(a))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_step_deterministic(i, a):
    m = _clover_small()
    s = AgentState(m.free_cells[i % m.n_cells])
    assert m.step(s, a) == m.step(s, a)


_CACHE = {}


def _clover_small():
    if "m" not in _CACHE:
        _CACHE["m"] = make_env("clover", 12, obs_mode="identity", seed=5)
    return _CACHE["m"]


def test_point_mass_walk_and_geodesic():
    pm = PointMass(PointMassSpec(bounds=(0, 0, 4, 4), walls=(((2.0, 0.0), (2.0, 3.0)),)))
    log = pm.random_walk(200, seed=0)
    assert log.total_steps == 200 and log.pose_dim == 4
    assert np.all(log.poses[:, :2] >= 0) and np.all(log.poses[:, :2] <= 4)
    left, right = AgentState((1.0, 0.25)), AgentState((3.0, 0.25))
    # around the wall: must climb above y=3 and come back down
    assert pm.geodesic(left, right) >= 4 + 2 * 5
