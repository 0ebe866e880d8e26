"""Desk-scale environments: grid mazes, a point mass, observation lifting.

Ground-truth helpers (``geodesic_oracle``, all-pairs distances) live here for
tests and evaluation code; learner modules never import this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .buffer import TrajectoryLog

# N, E, S, W
GRID_MOVES = np.array([(0, 1), (1, 0), (0, -1), (-1, 0)], dtype=np.int64)
ACTION_NAMES = ("N", "E", "S", "W")


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class AgentState:
    pose: tuple
    vel: tuple = (0.0, 0.0)


# -- observation lifting ------------------------------------------------------
@dataclass(frozen=True)
class Lifting:
    """Deterministic map from ground-truth state to an observation vector.

    ``identity`` returns the raw state, ``onehot`` a cell indicator (grid
    only), ``random`` sin/cos features of fixed random projections.
    """

    mode: str = "random"
    dim: int = 64
    scale: float = 4.0
    seed: int = 0
    state_dim: int = 2
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "onehot", "random"):
            raise ValueError(f"unknown observation mode {self.mode!r}")
        if self.mode == "onehot" and self.grid_shape is None:
            raise ValueError("one-hot observations need a grid")
        if self.mode == "random" and self.dim % 2:
            raise ValueError("random-feature dimension must be even")

    @property
    def obs_dim(self) -> int:
        if self.mode == "identity":
            return self.state_dim
        if self.mode == "onehot":
            return self.grid_shape[0] * self.grid_shape[1]
        return self.dim

    @cached_property
    def _projection(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed + 7919)
        w = rng.normal(0.0, 1.0 / self.scale, size=(self.dim // 2, self.state_dim))
        b = rng.uniform(0.0, 2 * np.pi, size=self.dim // 2)
        return w, b

    def __call__(self, states: np.ndarray) -> np.ndarray:
        """Lift an ``(n, state_dim)`` array (or a single state) to observations."""
        x = np.asarray(states, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if self.mode == "identity":
            out = x.copy()
        elif self.mode == "onehot":
            w, h = self.grid_shape
            cell = x[:, 1].astype(np.int64) * w + x[:, 0].astype(np.int64)
            out = np.zeros((x.shape[0], w * h))
            out[np.arange(x.shape[0]), cell] = 1.0
        else:
            w, b = self._projection
            proj = x @ w.T + b
            out = np.concatenate([np.sin(proj), np.cos(proj)], axis=1)
        out = out.astype(np.float32)
        return out[0] if single else out


# -- grid mazes ---------------------------------------------------------------
@dataclass(frozen=True)
class GridMazeSpec:
    width: int
    height: int
    blocked: frozenset = field(default_factory=frozenset)
    delta: float = 1.0
    seed: int = 0


class GridMaze:
    """4-connected grid; a move into a blocked cell or the border is a no-op."""

    kind = "grid"
    n_actions = 4
    pose_dim = 2

    def __init__(self, spec: GridMazeSpec, lifting: Lifting | None = None, check_connected: bool = True):
        self.spec = spec
        self.width, self.height = spec.width, spec.height
        self.free_mask = np.ones((spec.width, spec.height), dtype=bool)
        for (x, y) in spec.blocked:
            self.free_mask[x, y] = False
        if lifting is None:
            lifting = Lifting("identity", state_dim=2, grid_shape=(spec.width, spec.height))
        self.lifting = lifting
        cells = np.argwhere(self.free_mask)
        self.free_cells = [tuple(int(v) for v in c) for c in cells]
        self._cell_id = -np.ones((spec.width, spec.height), dtype=np.int64)
        for k, (x, y) in enumerate(self.free_cells):
            self._cell_id[x, y] = k
        nxt = np.empty((len(self.free_cells), 4), dtype=np.int64)
        for k, (x, y) in enumerate(self.free_cells):
            for a, (dx, dy) in enumerate(GRID_MOVES):
                tx, ty = x + dx, y + dy
                ok = 0 <= tx < self.width and 0 <= ty < self.height and self.free_mask[tx, ty]
                nxt[k, a] = self._cell_id[tx, ty] if ok else k
        self.next_cell = nxt
        if check_connected and self.free_cells and self.n_components() != 1:
            raise ValueError("free cells of a maze must form one connected component")

    # ground-truth helpers
    @property
    def n_cells(self) -> int:
        return len(self.free_cells)

    def cell_id(self, pose) -> int:
        x, y = int(round(pose[0])), int(round(pose[1]))
        if not (0 <= x < self.width and 0 <= y < self.height) or not self.free_mask[x, y]:
            raise ValueError(f"pose {pose} is not a free cell")
        return int(self._cell_id[x, y])

    def is_free(self, pose) -> bool:
        x, y = int(pose[0]), int(pose[1])
        return 0 <= x < self.width and 0 <= y < self.height and bool(self.free_mask[x, y])

    def _graph(self) -> csr_matrix:
        n = self.n_cells
        rows = np.repeat(np.arange(n), 4)
        cols = self.next_cell.reshape(-1)
        keep = rows != cols
        return csr_matrix((np.ones(int(keep.sum())), (rows[keep], cols[keep])), shape=(n, n))

    def n_components(self) -> int:
        from scipy.sparse.csgraph import connected_components
        return int(connected_components(self._graph(), directed=True, connection="strong")[0])

    @cached_property
    def distances(self) -> np.ndarray:
        """All-pairs BFS step counts between free cells (``inf`` if unreachable)."""
        return shortest_path(self._graph(), method="D", unweighted=True)

    # dynamics
    def state(self, x: int, y: int) -> AgentState:
        return AgentState((int(x), int(y)))

    def step(self, state: AgentState, action) -> tuple[AgentState, bool]:
        a = _grid_action(action)
        k = self.cell_id(state.pose)
        nk = int(self.next_cell[k, a])
        return AgentState(self.free_cells[nk]), nk == k

    def observe(self, state: AgentState) -> np.ndarray:
        return self.lifting(np.asarray(state.pose, dtype=np.float64))

    def pose_array(self, state: AgentState) -> np.ndarray:
        return np.asarray(state.pose, dtype=np.float32)

    def state_from_pose(self, pose) -> AgentState:
        return AgentState((int(round(pose[0])), int(round(pose[1]))))

    def sample_state(self, rng: np.random.Generator) -> AgentState:
        return AgentState(self.free_cells[int(rng.integers(self.n_cells))])

    def random_walk(self, steps: int, seed: int, start: AgentState | None = None) -> TrajectoryLog:
        if steps < 1:
            raise ValueError("random walk needs at least one step")
        rng = np.random.default_rng(seed)
        k = self.cell_id(start.pose) if start is not None else int(rng.integers(self.n_cells))
        actions = rng.integers(0, 4, size=steps)
        cells = np.empty(steps + 1, dtype=np.int64)
        cells[0] = k
        nxt = self.next_cell
        for t in range(steps):
            k = nxt[k, actions[t]]
            cells[t + 1] = k
        poses = np.asarray(self.free_cells, dtype=np.float64)[cells]
        log = TrajectoryLog(self.lifting.obs_dim, 4, 2)
        log.append_episode(self.lifting(poses), actions, poses)
        return log

    def geodesic(self, s1: AgentState, s2: AgentState) -> int | None:
        d = self.distances[self.cell_id(s1.pose), self.cell_id(s2.pose)]
        return None if math.isinf(d) else int(d)

    def walls(self) -> list[tuple[int, int]]:
        return sorted(tuple(c) for c in np.argwhere(~self.free_mask).tolist())


def _grid_action(action) -> int:
    if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
        raise InvalidActionError(f"grid action must be an integer index, got {action!r}")
    if not 0 <= int(action) < 4:
        raise InvalidActionError(f"grid action {action} outside [0, 4)")
    return int(action)


def open_grid(width: int, height: int | None = None, seed: int = 0) -> GridMazeSpec:
    return GridMazeSpec(width, height or width, frozenset(), seed=seed)


def clover_maze(size: int = 20, obstacle_density: float = 0.05, seed: int = 0) -> GridMazeSpec:
    """Four round lobes joined through a central hub, sprinkled with 1-cell columns.

    Adjacent lobes are separated by wall wedges, so cells that are close in
    the plane can be far apart geodesically.
    """
    c = (size - 1) / 2.0
    q = size / 4.0
    lobe_r = 0.21 * size
    hub_r = 0.17 * size
    centers = [(c - q, c - q), (c - q, c + q), (c + q, c - q), (c + q, c + q)]
    free = set()
    for x in range(size):
        for y in range(size):
            if any(math.hypot(x - cx, y - cy) <= lobe_r for cx, cy in centers) or math.hypot(x - c, y - c) <= hub_r:
                free.add((x, y))
    blocked = {(x, y) for x in range(size) for y in range(size)} - free
    rng = np.random.default_rng(seed)
    n_cols = int(round(obstacle_density * len(free)))
    order = sorted(free)
    rng.shuffle(order)
    placed = 0
    for cell in order:
        if placed >= n_cols:
            break
        trial = frozenset(blocked | {cell})
        if GridMaze(GridMazeSpec(size, size, trial), check_connected=False).n_components() == 1:
            blocked.add(cell)
            placed += 1
    return GridMazeSpec(size, size, frozenset(blocked), seed=seed)


# -- point mass ---------------------------------------------------------------
@dataclass(frozen=True)
class PointMassSpec:
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 10.0, 10.0)
    walls: tuple = ()
    dt: float = 0.1
    accel_max: float = 1.0
    vel_max: float = 2.0

    def __post_init__(self):
        if self.dt <= 0 or self.accel_max <= 0 or self.vel_max <= 0:
            raise ValueError("dt, accel_max and vel_max must be positive")


def _segments_cross(p, q, a, b) -> bool:
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True

    def on(u, v, w):
        return min(u[0], v[0]) <= w[0] <= max(u[0], v[0]) and min(u[1], v[1]) <= w[1] <= max(u[1], v[1])

    return (d1 == 0 and on(a, b, p)) or (d2 == 0 and on(a, b, q)) or (d3 == 0 and on(p, q, a)) or (d4 == 0 and on(p, q, b))


class PointMass:
    """Maze2D-style point mass with 8 discretised acceleration actions.

    Semi-implicit Euler; hitting a wall or the bounds cancels motion and
    velocity along the offending axis.
    """

    kind = "pointmass"
    n_actions = 8
    pose_dim = 4

    def __init__(self, spec: PointMassSpec, lifting: Lifting | None = None):
        self.spec = spec
        self.lifting = lifting or Lifting("identity", state_dim=4)
        ang = np.arange(8) * np.pi / 4
        self.accels = np.round(np.stack([np.cos(ang), np.sin(ang)], 1), 12) * spec.accel_max

    def _accel(self, action) -> np.ndarray:
        if isinstance(action, (int, np.integer)) and not isinstance(action, (bool, np.bool_)):
            if not 0 <= int(action) < 8:
                raise InvalidActionError(f"point-mass action {action} outside [0, 8)")
            return self.accels[int(action)]
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise InvalidActionError(f"malformed acceleration {action!r}")
        if np.linalg.norm(a) > self.spec.accel_max * (1 + 1e-9):
            raise InvalidActionError("acceleration exceeds accel_max")
        return a

    def _blocked(self, p, q) -> bool:
        return any(_segments_cross(p, q, a, b) for a, b in self.spec.walls)

    def step(self, state: AgentState, action) -> tuple[AgentState, bool]:
        sp = self.spec
        acc = self._accel(action)
        vel = np.asarray(state.vel, dtype=np.float64) + acc * sp.dt
        speed = np.linalg.norm(vel)
        if speed > sp.vel_max:
            vel *= sp.vel_max / speed
        pos = np.asarray(state.pose, dtype=np.float64)
        collided = False
        lo, hi = np.array(sp.bounds[:2]), np.array(sp.bounds[2:])
        for axis in (0, 1):
            target = pos.copy()
            target[axis] += vel[axis] * sp.dt
            if target[axis] < lo[axis] or target[axis] > hi[axis] or self._blocked(tuple(pos), tuple(target)):
                vel[axis] = 0.0
                collided = collided or target[axis] != pos[axis]
            else:
                pos = target
        return AgentState((float(pos[0]), float(pos[1])), (float(vel[0]), float(vel[1]))), collided

    def observe(self, state: AgentState) -> np.ndarray:
        return self.lifting(np.array([*state.pose, *state.vel]))

    def pose_array(self, state: AgentState) -> np.ndarray:
        return np.array([*state.pose, *state.vel], dtype=np.float32)

    def state_from_pose(self, pose) -> AgentState:
        return AgentState((float(pose[0]), float(pose[1])), (float(pose[2]), float(pose[3])))

    def sample_state(self, rng: np.random.Generator) -> AgentState:
        grid = self.discretize()
        x, y = grid.free_cells[int(rng.integers(grid.n_cells))]
        return AgentState(self._cell_center((x, y)), (0.0, 0.0))

    def random_walk(self, steps: int, seed: int, start: AgentState | None = None) -> TrajectoryLog:
        if steps < 1:
            raise ValueError("random walk needs at least one step")
        rng = np.random.default_rng(seed)
        state = start if start is not None else self.sample_state(rng)
        actions = rng.integers(0, 8, size=steps)
        poses = [self.pose_array(state)]
        for a in actions:
            state, _ = self.step(state, int(a))
            poses.append(self.pose_array(state))
        poses = np.stack(poses)
        log = TrajectoryLog(self.lifting.obs_dim, 8, 4)
        log.append_episode(self.lifting(poses.astype(np.float64)), actions, poses)
        return log

    # discretised geodesic approximation
    cell_size = 0.5

    def _cell_center(self, cell) -> tuple[float, float]:
        x0, y0 = self.spec.bounds[:2]
        return (x0 + (cell[0] + 0.5) * self.cell_size, y0 + (cell[1] + 0.5) * self.cell_size)

    @cached_property
    def _discrete(self) -> tuple[int, int, np.ndarray]:
        x0, y0, x1, y1 = self.spec.bounds
        w = int(math.ceil((x1 - x0) / self.cell_size))
        h = int(math.ceil((y1 - y0) / self.cell_size))
        n = w * h
        rows, cols = [], []
        for x in range(w):
            for y in range(h):
                p = self._cell_center((x, y))
                for dx, dy in GRID_MOVES:
                    tx, ty = x + dx, y + dy
                    if 0 <= tx < w and 0 <= ty < h and not self._blocked(p, self._cell_center((tx, ty))):
                        rows.append(x * h + y)
                        cols.append(tx * h + ty)
        g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        return w, h, shortest_path(g, method="D", unweighted=True)

    def discretize(self) -> GridMaze:
        w, h, _ = self._discrete
        return GridMaze(GridMazeSpec(w, h), check_connected=False)

    def geodesic(self, s1: AgentState, s2: AgentState) -> int | None:
        w, h, dist = self._discrete
        x0, y0 = self.spec.bounds[:2]

        def cell(s):
            cx = min(int((s.pose[0] - x0) / self.cell_size), w - 1)
            cy = min(int((s.pose[1] - y0) / self.cell_size), h - 1)
            return cx * h + cy

        d = dist[cell(s1), cell(s2)]
        return None if math.isinf(d) else int(d)


def geodesic_oracle(env, s1: AgentState, s2: AgentState) -> int | None:
    """Exact BFS step count between two states, ``None`` when unreachable."""
    return env.geodesic(s1, s2)


def step(env, state: AgentState, action) -> tuple[AgentState, bool]:
    return env.step(state, action)


def observe(env, state: AgentState) -> np.ndarray:
    return env.observe(state)


def random_walk(env, steps: int, seed: int, start: AgentState | None = None) -> TrajectoryLog:
    return env.random_walk(steps, seed, start)


def obs_equality_tolerance(env) -> float:
    """Half the smallest gap between observations of distinct free cells."""
    poses = np.asarray(env.free_cells, dtype=np.float64)
    obs = env.lifting(poses).astype(np.float64)
    sq = np.sum(obs ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * obs @ obs.T
    np.fill_diagonal(d2, np.inf)
    return 0.5 * float(np.sqrt(max(d2.min(), 0.0)))


def make_env(kind: str = "clover", width: int = 20, height: int | None = None, obstacle_density: float = 0.05,
             obs_mode: str = "random", obs_dim: int = 64, obs_scale: float = 4.0, seed: int = 0,
             blocked: Sequence[tuple[int, int]] = ()):
    height = height or width
    if kind == "pointmass":
        lifting = Lifting(obs_mode, obs_dim, obs_scale, seed, state_dim=4)
        return PointMass(PointMassSpec(bounds=(0.0, 0.0, float(width), float(height))), lifting)
    if kind == "clover":
        spec = clover_maze(width, obstacle_density, seed)
    elif kind == "open":
        spec = GridMazeSpec(width, height, frozenset(map(tuple, blocked)), seed=seed)
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    lifting = Lifting(obs_mode, obs_dim, obs_scale, seed, state_dim=2, grid_shape=(spec.width, spec.height))
    return GridMaze(spec, lifting)
