"""Offline goal-conditioned Q-learning with hindsight relabelling.

Reward is the goal indicator and bootstrapping stops at the goal::

    target = 1[s' = g] + gamma * 1[s' != g] * Q_target(s', argmax_a Q(s', a, g), g)

so the optimal value of a pair ``d`` steps apart is ``gamma ** (d - 1)``,
and ``1 + log_gamma(max_a Q)`` recovers the step count.

Q objects work on *keys*: integer state ids for the tabular backend, float
observation rows for the network backend. ``log_keys``/``keys`` produce them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .buffer import TrajectoryLog, sample_hindsight
from .nn import MLP, make_optimizer

log_ = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.95
DEFAULT_EPS = 1e-6


@dataclass
class QTrainConfig:
    steps: int = 20_000
    batch: int = 256
    lr: float = 1.0
    target_sync_every: int = 500
    gamma: float = DEFAULT_GAMMA
    geom_p: float = 0.1
    optimizer: str = "sgd"

    def __post_init__(self):
        if min(self.steps, self.batch, self.target_sync_every) <= 0 or self.lr <= 0 or self.geom_p <= 0:
            raise ValueError("Q training settings must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class TDBatch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    g: np.ndarray

    def __len__(self) -> int:
        return len(self.a)


class _QBase:
    gamma: float
    eps: float
    n_actions: int

    def __init__(self):
        self._log_keys: tuple | None = None
        self.n_updates = 0

    def log_keys(self, log: TrajectoryLog) -> np.ndarray:
        tag = (id(log), log.n_states)
        if self._log_keys is None or self._log_keys[0] != tag:
            self._log_keys = (tag, self._make_log_keys(log))
        return self._log_keys[1]

    def values(self, s_obs, g_obs) -> np.ndarray:
        return self.values_keys(self.keys(np.atleast_2d(s_obs)), self.keys(np.atleast_2d(g_obs)))

    def _targets(self, batch: TDBatch) -> np.ndarray:
        reached = self.same(batch.s_next, batch.g)
        online_next = self.values_keys(batch.s_next, batch.g)
        best = np.argmax(online_next, axis=1)
        boot = self._target_values(batch.s_next, batch.g)[np.arange(len(batch)), best]
        return np.where(reached, 1.0, self.gamma * boot)

    @property
    def d_max(self) -> float:
        return 1.0 + np.log(self.eps) / np.log(self.gamma)


class TabularQ(_QBase):
    """Q table indexed by (state id, action, goal id); unseen states read as 0."""

    backend = "tabular"

    def __init__(self, n_actions: int, gamma: float = DEFAULT_GAMMA, eps: float = DEFAULT_EPS):
        super().__init__()
        self.n_actions, self.gamma, self.eps = int(n_actions), float(gamma), float(eps)
        self.states = np.zeros((0, 0), dtype=np.float32)
        self._lookup: dict[bytes, int] = {}
        self.table = np.zeros((0, n_actions, 0))
        self.target = self.table.copy()

    @property
    def n_states(self) -> int:
        return len(self._lookup)

    def register(self, obs: np.ndarray) -> np.ndarray:
        obs = np.ascontiguousarray(obs, dtype=np.float32)
        if self.states.size == 0:
            self.states = np.zeros((0, obs.shape[1]), dtype=np.float32)
        rows = obs.view(np.dtype((np.void, obs.dtype.itemsize * obs.shape[1]))).ravel()
        uniq, first, inverse = np.unique(rows, return_index=True, return_inverse=True)
        uniq_ids = np.empty(len(uniq), dtype=np.int64)
        new = []
        for k, key in enumerate(uniq):
            b = key.tobytes()
            if b not in self._lookup:
                self._lookup[b] = len(self._lookup)
                new.append(first[k])
            uniq_ids[k] = self._lookup[b]
        if new:
            new = sorted(new, key=lambda i: self._lookup[obs[i].tobytes()])
            self.states = np.concatenate([self.states, obs[new]])
            self._grow()
        return uniq_ids[inverse.reshape(-1)]

    def _grow(self) -> None:
        n_old, n = self.table.shape[0], self.n_states
        if n == n_old:
            return
        for name in ("table", "target"):
            old = getattr(self, name)
            new = np.zeros((n, self.n_actions, n))
            new[:n_old, :, :n_old] = old
            setattr(self, name, new)

    def keys(self, obs: np.ndarray) -> np.ndarray:
        obs = np.ascontiguousarray(np.atleast_2d(obs), dtype=np.float32)
        return np.array([self._lookup.get(row.tobytes(), -1) for row in obs], dtype=np.int64)

    def _make_log_keys(self, log: TrajectoryLog) -> np.ndarray:
        return self.register(log.obs) if log.n_states else np.zeros(0, np.int64)

    def same(self, k1, k2) -> np.ndarray:
        return (np.asarray(k1) == np.asarray(k2)) & (np.asarray(k1) >= 0)

    def _lookup_table(self, table, s, g) -> np.ndarray:
        s, g = np.asarray(s), np.asarray(g)
        ok = (s >= 0) & (g >= 0)
        out = np.zeros((len(s), self.n_actions))
        if ok.any():
            out[ok] = table[s[ok], :, g[ok]]
        return out

    def values_keys(self, s, g) -> np.ndarray:
        return self._lookup_table(self.table, s, g)

    def _target_values(self, s, g) -> np.ndarray:
        return self._lookup_table(self.target, s, g)

    def td_update(self, batch: TDBatch, lr: float = 1.0) -> float:
        if len(batch) == 0:
            raise ValueError("empty TD batch")
        if np.any(batch.s < 0) or np.any(batch.g < 0):
            raise ValueError("tabular TD batch refers to unregistered states")
        y = self._targets(batch)
        q = self.table[batch.s, batch.a, batch.g]
        err = q - y
        self.table[batch.s, batch.a, batch.g] = q - lr * err
        self.n_updates += 1
        return float(np.mean(err ** 2))

    def sync_target(self) -> None:
        self.target = self.table.copy()

    def save(self, path) -> None:
        serialize.save_arrays(path, "q.tabular",
                              {"gamma": self.gamma, "eps": self.eps, "n_actions": self.n_actions},
                              {"states": self.states, "table": self.table})

    @classmethod
    def from_arrays(cls, meta, arrays) -> "TabularQ":
        q = cls(meta["n_actions"], meta["gamma"], meta["eps"])
        if arrays["states"].size:
            q.register(arrays["states"])
        q.table = arrays["table"].copy()
        q.sync_target()
        return q


class MLPQ(_QBase):
    """Fully-connected Q over concatenated (observation, goal), one output per action."""

    backend = "mlp"

    def __init__(self, obs_dim: int, n_actions: int, gamma: float = DEFAULT_GAMMA, eps: float = DEFAULT_EPS,
                 hidden=(128, 128), eq_tol: float = 0.0, seed: int = 0, optimizer: str = "sgd", lr: float = 1e-2):
        super().__init__()
        self.obs_dim, self.n_actions = int(obs_dim), int(n_actions)
        self.gamma, self.eps, self.eq_tol = float(gamma), float(eps), float(eq_tol)
        self.hidden = tuple(int(h) for h in hidden)
        self.net = MLP([2 * obs_dim, *self.hidden, n_actions], np.random.default_rng(seed))
        self.target_params = [p.copy() for p in self.net.params]
        self.optimizer_name, self.lr = optimizer, lr
        self.opt = make_optimizer(optimizer, self.net.params, lr)

    def keys(self, obs) -> np.ndarray:
        return np.atleast_2d(np.asarray(obs, dtype=np.float64))

    def _make_log_keys(self, log: TrajectoryLog) -> np.ndarray:
        return log.obs.astype(np.float64)

    def same(self, k1, k2) -> np.ndarray:
        d = np.linalg.norm(np.asarray(k1) - np.asarray(k2), axis=-1)
        return d <= self.eq_tol

    def values_keys(self, s, g) -> np.ndarray:
        return self.net(np.concatenate([s, g], axis=1))

    def _target_values(self, s, g) -> np.ndarray:
        live = self.net.params
        self.net.params = self.target_params
        try:
            return self.net(np.concatenate([s, g], axis=1))
        finally:
            self.net.params = live

    def td_loss_and_grads(self, batch: TDBatch, y: np.ndarray | None = None):
        """Mean squared TD error and its gradient w.r.t. the online parameters."""
        if y is None:
            y = self._targets(batch)
        out, cache = self.net.forward(np.concatenate([batch.s, batch.g], axis=1))
        rows = np.arange(len(batch))
        err = out[rows, batch.a] - y
        grad_out = np.zeros_like(out)
        grad_out[rows, batch.a] = 2.0 * err / len(batch)
        grads, _ = self.net.backward(cache, grad_out)
        return float(np.mean(err ** 2)), grads

    def td_update(self, batch: TDBatch, lr: float | None = None) -> float:
        if len(batch) == 0:
            raise ValueError("empty TD batch")
        if lr is not None:
            self.opt.lr = lr
        loss, grads = self.td_loss_and_grads(batch)
        self.opt.step(grads)
        self.n_updates += 1
        return loss

    def sync_target(self) -> None:
        self.target_params = [p.copy() for p in self.net.params]

    def save(self, path) -> None:
        meta = {"gamma": self.gamma, "eps": self.eps, "n_actions": self.n_actions, "obs_dim": self.obs_dim,
                "hidden": list(self.hidden), "eq_tol": self.eq_tol}
        serialize.save_arrays(path, "q.mlp", meta, {f"p{k}": p for k, p in enumerate(self.net.params)})

    @classmethod
    def from_arrays(cls, meta, arrays) -> "MLPQ":
        q = cls(meta["obs_dim"], meta["n_actions"], meta["gamma"], meta["eps"], meta["hidden"], meta["eq_tol"])
        q.net.params[:] = [arrays[f"p{k}"].copy() for k in range(len(q.net.params))]
        q.opt = make_optimizer(q.optimizer_name, q.net.params, q.lr)
        q.sync_target()
        return q


def load_q(path):
    kind, meta, arrays = serialize.load_arrays(path)
    if kind == "q.tabular":
        return TabularQ.from_arrays(meta, arrays)
    if kind == "q.mlp":
        return MLPQ.from_arrays(meta, arrays)
    raise serialize.ModelFileError(f"{path}: not a Q-function file ({kind})")


# -- training -------------------------------------------------------------------
def make_batch(q, log: TrajectoryLog, hb) -> TDBatch:
    keys = q.log_keys(log)
    return TDBatch(keys[hb.t], hb.action, keys[hb.t_next], keys[hb.goal])


def td_update(q, batch: TDBatch, lr: float | None = None) -> float:
    return q.td_update(batch, lr) if lr is not None else q.td_update(batch)


def train_q(q, log: TrajectoryLog, cfg: QTrainConfig, rng: np.random.Generator, progress_every: int = 100):
    """Hindsight DDQN on ``log``; returns ``[(step, mean TD loss), ...]``."""
    q.log_keys(log)
    curve = []
    window = []
    for step in range(1, cfg.steps + 1):
        hb = sample_hindsight(log, cfg.batch, rng, "geometric", p=cfg.geom_p)
        window.append(q.td_update(make_batch(q, log, hb), cfg.lr))
        if step % cfg.target_sync_every == 0:
            q.sync_target()
        if step % progress_every == 0 or step == cfg.steps:
            curve.append((step, float(np.mean(window))))
            window = []
    q.sync_target()
    return curve


def fit_tabular_exact(q: TabularQ, log: TrajectoryLog, max_sweeps: int = 10_000) -> int:
    """Synchronous full sweeps over every observed transition and every known goal.

    Returns the number of sweeps until the table stopped changing.
    """
    keys = q.log_keys(log)
    src = log.transition_indices()
    trans = np.unique(np.stack([keys[src], log.actions[src], keys[src + 1]], 1), axis=0)
    goals = np.arange(q.n_states)
    s = np.repeat(trans[:, 0], len(goals))
    a = np.repeat(trans[:, 1], len(goals))
    s2 = np.repeat(trans[:, 2], len(goals))
    g = np.tile(goals, len(trans))
    batch = TDBatch(s, a, s2, g)
    for sweep in range(1, max_sweeps + 1):
        q.sync_target()
        before = q.table.copy()
        q.td_update(batch, 1.0)
        if np.array_equal(before, q.table):
            q.sync_target()
            return sweep
    q.sync_target()
    return max_sweeps


# -- distances ----------------------------------------------------------------------
def q_values(q, s_obs, g_obs) -> np.ndarray:
    """Per-action values for a single (state, goal) pair."""
    return q.values(s_obs, g_obs)[0]


def step_distance_keys(q, s, g) -> np.ndarray:
    vmax = np.max(q.values_keys(s, g), axis=1)
    d = 1.0 + np.log(np.clip(vmax, q.eps, 1.0)) / np.log(q.gamma)
    return np.where(q.same(s, g), 0.0, d)


def d_q_keys(q, s, g) -> np.ndarray:
    return np.maximum(step_distance_keys(q, s, g), step_distance_keys(q, g, s))


def step_distance(q, s_obs, g_obs) -> np.ndarray:
    """Estimated steps from s to g: ``1 + log_gamma(clamp(max_a Q, eps, 1))``, 0 when s == g."""
    s, g = q.keys(np.atleast_2d(s_obs)), q.keys(np.atleast_2d(g_obs))
    return step_distance_keys(q, s, g)


def d_q(q, s_obs, g_obs) -> np.ndarray:
    """Symmetric reachability distance: the larger of the two directed estimates."""
    s, g = q.keys(np.atleast_2d(s_obs)), q.keys(np.atleast_2d(g_obs))
    return d_q_keys(q, s, g)


def calibrate_cq(q, log: TrajectoryLog, fraction: float = 1.0, max_pairs: int | None = 20_000,
                 rng: np.random.Generator | None = None) -> float:
    """Fraction of the mean d_Q between consecutive (distinct) buffer states."""
    if log.n_states == 0 or log.total_steps == 0:
        raise ValueError("cannot calibrate c_Q on an empty log")
    keys = q.log_keys(log)
    t = log.transition_indices()
    moved = ~np.all(log.obs[t] == log.obs[t + 1], axis=1)
    t = t[moved]
    if t.size == 0:
        raise ValueError("log has no transitions between distinct observations")
    if max_pairs is not None and t.size > max_pairs:
        t = np.sort((rng or np.random.default_rng(0)).choice(t, max_pairs, replace=False))
    return float(fraction * np.mean(d_q_keys(q, keys[t], keys[t + 1])))


def make_q(backend: str, obs_dim: int, n_actions: int, gamma: float = DEFAULT_GAMMA, seed: int = 0,
           lr: float = 1e-2, optimizer: str = "sgd", eq_tol: float = 0.0, hidden=(128, 128)):
    if backend == "tabular":
        return TabularQ(n_actions, gamma)
    if backend == "mlp":
        return MLPQ(obs_dim, n_actions, gamma, hidden=hidden, eq_tol=eq_tol, seed=seed, optimizer=optimizer, lr=lr)
    raise ValueError(f"unknown Q backend {backend!r}")
