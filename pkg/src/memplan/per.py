"""Experience retrieval over the embedding index.

Given a current state and a goal, find the best contiguous buffer segment
that starts within ``d_p`` (embedding distance) of the current state, ends
within ``d_p`` of the goal and spans at most ``l_max`` transitions. With the
default reward (negative length) the best segment is the shortest one; ties go
to the lowest global start index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffer import Segment, TrajectoryLog
from .embed import EmbeddingIndex


@dataclass(frozen=True)
class PerConfig:
    d_p: float
    l_max: int = 20
    reward_mode: str = "neg_length"
    step_rewards: np.ndarray | None = None  # reward for leaving each global state (custom mode)

    def __post_init__(self):
        if self.d_p < 0:
            raise ValueError("d_p must be non-negative")
        if self.l_max < 0:
            raise ValueError("l_max must be non-negative")
        if self.reward_mode not in ("neg_length", "custom"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.reward_mode == "custom" and self.step_rewards is None:
            raise ValueError("custom reward mode needs per-step rewards")


def neighbors_z(index: EmbeddingIndex, z_query: np.ndarray, d_p: float) -> np.ndarray:
    """Sorted global indices whose embedding lies within ``d_p`` of ``z_query`` (linear scan)."""
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64)
    d = np.linalg.norm(index.z - np.asarray(z_query, dtype=np.float64).reshape(1, -1), axis=1)
    return np.flatnonzero(d <= d_p)


def neighbors(index: EmbeddingIndex, query_obs, d_p: float) -> np.ndarray:
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64)
    return neighbors_z(index, index.embed(query_obs)[0], d_p)


def visitation_count(index: EmbeddingIndex, query_obs, d_p: float) -> int:
    return int(neighbors(index, query_obs, d_p).size)


def best_pair(log: TrajectoryLog, starts: np.ndarray, ends: np.ndarray, cfg: PerConfig) -> tuple[int, int] | None:
    """Best (i, j) with i in ``starts``, j in ``ends``, same episode, 0 <= j - i <= l_max."""
    if starts.size == 0 or ends.size == 0:
        return None
    ep = log.episode_of
    if cfg.reward_mode == "neg_length":
        pos = np.searchsorted(ends, starts, side="left")
        ok = pos < ends.size
        i, j = starts[ok], ends[pos[ok]]
        gap = j - i
        ok = (ep[i] == ep[j]) & (gap <= cfg.l_max)
        if not ok.any():
            return None
        i, gap = i[ok], gap[ok]
        k = int(np.lexsort((i, gap))[0])
        return int(i[k]), int(i[k] + gap[k])
    return _best_custom(log, starts, ends, cfg)


def _best_custom(log, starts, ends, cfg) -> tuple[int, int] | None:
    n = log.n_states
    is_end = np.zeros(n, dtype=bool)
    is_end[ends] = True
    prefix = np.concatenate([[0.0], np.cumsum(np.asarray(cfg.step_rewards, dtype=np.float64)[:n])])
    ep = log.episode_of
    best, best_r = None, -np.inf
    for k in range(cfg.l_max + 1):
        j = starts + k
        ok = j < n
        i, j = starts[ok], j[ok]
        ok = is_end[j] & (ep[i] == ep[j])
        if not ok.any():
            continue
        i, j = i[ok], j[ok]
        r = prefix[j] - prefix[i]
        m = int(np.argmax(r))  # first max = lowest start for this length
        cand = (r[m], -int(i[m]), -k)
        if best is None or cand > (best_r, -best[0], -(best[1] - best[0])):
            best, best_r = (int(i[m]), int(j[m])), float(r[m])
    return best


def segment_reward(log: TrajectoryLog, seg: Segment, cfg: PerConfig) -> float:
    if cfg.reward_mode == "neg_length":
        return -float(len(seg))
    r = np.asarray(cfg.step_rewards, dtype=np.float64)
    return float(r[seg.global_start:seg.global_end].sum())


def retrieve(index: EmbeddingIndex, log: TrajectoryLog, s_c, s_g, cfg: PerConfig) -> Segment | None:
    """Best segment from near ``s_c`` to near ``s_g`` (observations), or ``None``."""
    if len(index) == 0:
        return None
    z = index.embed(np.stack([np.asarray(s_c), np.asarray(s_g)]))
    return retrieve_z(index, log, z[0], z[1], cfg)


def retrieve_z(index: EmbeddingIndex, log: TrajectoryLog, z_c, z_g, cfg: PerConfig) -> Segment | None:
    pair = best_pair(log, neighbors_z(index, z_c, cfg.d_p), neighbors_z(index, z_g, cfg.d_p), cfg)
    return None if pair is None else log.segment_global(*pair)


def segment_len_metric(index: EmbeddingIndex, log: TrajectoryLog, s_c, s_g, cfg: PerConfig) -> float:
    seg = retrieve(index, log, s_c, s_g, cfg)
    return float("inf") if seg is None else float(len(seg))


class Retriever:
    """Retrieval bound to one (index, log, config) snapshot, caching neighbor sets of buffer states."""

    def __init__(self, index: EmbeddingIndex, log: TrajectoryLog, cfg: PerConfig):
        if len(index) != log.n_states:
            raise ValueError("embedding index and log disagree on the number of states")
        self.index, self.log, self.cfg = index, log, cfg
        self._cache: dict[int, np.ndarray] = {}
        self._obs_cache: dict[bytes, np.ndarray] = {}

    def neighbors_of(self, g: int) -> np.ndarray:
        hit = self._cache.get(g)
        if hit is None:
            hit = self._cache[g] = neighbors_z(self.index, self.index.z[g], self.cfg.d_p)
        return hit

    def neighbors_of_obs(self, obs) -> np.ndarray:
        key = np.asarray(obs, dtype=np.float32).tobytes()
        hit = self._obs_cache.get(key)
        if hit is None:
            if len(self._obs_cache) >= 4096:
                self._obs_cache.clear()
            hit = self._obs_cache[key] = neighbors(self.index, obs, self.cfg.d_p)
        return hit

    def between(self, starts: np.ndarray, ends: np.ndarray) -> Segment | None:
        pair = best_pair(self.log, starts, ends, self.cfg)
        return None if pair is None else self.log.segment_global(*pair)

    def buffer_pair(self, u: int, v: int) -> Segment | None:
        """Retrieval between two buffer states given by global index."""
        return self.between(self.neighbors_of(u), self.neighbors_of(v))

    def obs_pair(self, s_c, s_g) -> Segment | None:
        return self.between(self.neighbors_of_obs(s_c), self.neighbors_of_obs(s_g))

    def cost(self, seg: Segment) -> float:
        return -segment_reward(self.log, seg, self.cfg)

    def probe(self, s_c, s_g) -> dict:
        """Debug trace of one retrieval."""
        c, g = self.neighbors_of_obs(s_c), self.neighbors_of_obs(s_g)
        seg = self.between(c, g)
        out = {"start_neighbors": int(c.size), "goal_neighbors": int(g.size), "found": seg is not None}
        if seg is not None:
            out.update(episode=seg.episode_id, i=seg.start, j=seg.end, length=len(seg))
        return out
