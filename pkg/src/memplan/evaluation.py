"""Evaluation protocols. These read ground truth (poses, BFS distances); learners never do."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest, norm, spearmanr

from .buffer import TrajectoryLog
from .env import AgentState
from .planners import Roadmap
from .policy import execute


class BandInfeasibleError(ValueError):
    pass


@dataclass
class EvalConfig:
    bands: list[int] = field(default_factory=lambda: [4, 8, 12])
    pairs_per_band: int = 200
    success_radius: float = 1.0
    budget_multiplier: int = 4
    mode: str = "euclidean"
    seed: int = 0

    def __post_init__(self):
        if not self.bands:
            raise ValueError("at least one band is required")
        if self.pairs_per_band < 1:
            raise ValueError("pairs_per_band must be positive")
        if self.mode not in ("euclidean", "geodesic"):
            raise ValueError(f"unknown band mode {self.mode!r}")


def band_limits(n: int, mode: str) -> tuple[float, float]:
    """Half-open distance interval of band ``n``: one cell wide (euclidean) or eight cells (geodesic)."""
    return (float(n), float(n + 1)) if mode == "euclidean" else (float(n), float(n + 8))


def sample_eval_pairs(env, n: int, count: int, rng: np.random.Generator, mode: str = "euclidean",
                      max_draws: int = 2_000_000) -> list[tuple[AgentState, AgentState]]:
    """Rejection-sample (start, goal) cells whose distance falls in band ``n``."""
    lo, hi = band_limits(n, mode)
    cells = np.asarray(env.free_cells, dtype=np.float64)
    out: list[tuple[AgentState, AgentState]] = []
    drawn = 0
    while len(out) < count:
        if drawn >= max_draws:
            raise BandInfeasibleError(f"band {n} ({mode}) yielded {len(out)}/{count} pairs after {drawn} draws")
        k = 4096
        a, b = rng.integers(env.n_cells, size=k), rng.integers(env.n_cells, size=k)
        drawn += k
        if mode == "euclidean":
            d = np.linalg.norm(cells[a] - cells[b], axis=1)
        else:
            d = env.distances[a, b]
        for i in np.flatnonzero((d >= lo) & (d < hi)):
            out.append((AgentState(env.free_cells[a[i]]), AgentState(env.free_cells[b[i]])))
            if len(out) == count:
                break
    return out


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def not_worse(k_a: int, n_a: int, k_b: int, n_b: int, alpha: float = 0.05) -> bool:
    """True unless rate b exceeds rate a significantly (one-sided pooled two-proportion z-test)."""
    pa, pb = k_a / n_a, k_b / n_b
    if pa >= pb:
        return True
    pooled = (k_a + k_b) / (n_a + n_b)
    se = np.sqrt(pooled * (1 - pooled) * (1 / n_a + 1 / n_b))
    return bool((pb - pa) / se < norm.ppf(1 - alpha))


def eval_success_curve(env, policy, cfg: EvalConfig, pairs: dict[int, list] | None = None) -> dict:
    """Per-band success rates with Wilson intervals; budget is ``budget_multiplier * n`` steps."""
    rng = np.random.default_rng(cfg.seed)
    bands = []
    for n in cfg.bands:
        band_pairs = pairs[n] if pairs is not None else sample_eval_pairs(env, n, cfg.pairs_per_band, rng, cfg.mode)
        budget = max(1, cfg.budget_multiplier * n)
        wins, steps, fallbacks = 0, [], 0
        for s0, sg in band_pairs:
            res = execute(env, policy, s0, sg, budget, cfg.success_radius)
            wins += res.success
            steps.append(res.steps_taken)
            fallbacks += res.fallback_steps()
        m = len(band_pairs)
        lo, hi = wilson_interval(wins, m)
        bands.append({"n": n, "trials": m, "successes": wins, "rate": wins / m, "ci_low": lo, "ci_high": hi,
                      "mean_steps": float(np.mean(steps)), "budget": budget, "fallback_steps": fallbacks})
    return {"policy": getattr(policy, "name", type(policy).__name__), "bands": bands}


def eval_pairs(env, cfg: EvalConfig) -> dict[int, list]:
    """Fixed evaluation pairs per band, so several policies can be compared on identical trials."""
    rng = np.random.default_rng(cfg.seed)
    return {n: sample_eval_pairs(env, n, cfg.pairs_per_band, rng, cfg.mode) for n in cfg.bands}


# -- false edges ----------------------------------------------------------------------
def replay_segment(env, log: TrajectoryLog, seg) -> bool:
    """Re-execute the segment's actions from its recorded first pose and compare every pose."""
    poses = log.poses[seg.global_indices]
    state = env.state_from_pose(poses[0])
    for a, expect in zip(seg.actions, poses[1:]):
        state, _ = env.step(state, int(a))
        if not np.allclose(env.pose_array(state), expect):
            return False
    return True


def false_edge_count(roadmap: Roadmap, env, log: TrajectoryLog, slack: float = 2.0) -> tuple[int, int]:
    """Edges whose endpoints are more than ``slack`` times the claimed reach apart by BFS.

    Edges carrying a segment must also replay exactly in the environment.
    """
    false = 0
    for (u, v), e in sorted(roadmap.edges.items()):
        pu, pv = log.poses[roadmap.vertices[u]], log.poses[roadmap.vertices[v]]
        d = env.geodesic(env.state_from_pose(pu), env.state_from_pose(pv))
        bad = d is None or d > slack * max(e.claim, 1.0)
        if not bad and e.segment is not None:
            bad = not replay_segment(env, log, e.segment)
        false += bad
    return false, len(roadmap.edges)


# -- distance calibration ---------------------------------------------------------------
def calibration_pairs(env, rng: np.random.Generator, per_bin: int = 200, max_bfs: int = 15):
    """Cell pairs stratified by BFS distance 0..max_bfs."""
    d = env.distances
    a_all, b_all = np.nonzero(np.isfinite(d) & (d <= max_bfs))
    dist = d[a_all, b_all].astype(int)
    keep = []
    for k in range(max_bfs + 1):
        idx = np.flatnonzero(dist == k)
        if idx.size:
            keep.append(rng.choice(idx, min(per_bin, idx.size), replace=False))
    sel = np.sort(np.concatenate(keep))
    return a_all[sel], b_all[sel], dist[sel]


def distance_calibration(env, encoder, q, retriever=None, embed_model=None, rng=None, per_bin: int = 200,
                         max_bfs: int = 15) -> dict:
    """Per-BFS-bin statistics of embedding distance, d_Q, retrieval length and time-head mode."""
    from .embed import time_head_mode
    from .qlearn import d_q

    rng = rng or np.random.default_rng(0)
    a, b, bfs = calibration_pairs(env, rng, per_bin, max_bfs)
    cells = np.asarray(env.free_cells, dtype=np.float64)
    oa, ob = env.lifting(cells[a]), env.lifting(cells[b])
    d_phi = np.linalg.norm(encoder(oa) - encoder(ob), axis=1)
    dq = d_q(q, oa, ob)
    maxq = np.max(q.values(oa, ob), axis=1)
    seg_len = np.full(len(a), np.nan)
    if retriever is not None:
        for k in range(len(a)):
            seg = retriever.obs_pair(oa[k], ob[k])
            seg_len[k] = np.inf if seg is None else len(seg)
    t_mode = time_head_mode(embed_model, oa, ob).astype(float) if embed_model is not None else np.full(len(a), np.nan)
    rows = []
    for k in range(max_bfs + 1):
        m = bfs == k
        if not m.any():
            continue
        finite = seg_len[m][np.isfinite(seg_len[m])]
        rows.append({"bfs": k, "pairs": int(m.sum()),
                     "d_phi_mean": float(d_phi[m].mean()), "d_phi_std": float(d_phi[m].std()),
                     "d_q_mean": float(dq[m].mean()), "d_q_std": float(dq[m].std()),
                     "max_q_mean": float(maxq[m].mean()), "max_q_std": float(maxq[m].std()),
                     "len_mean": float(finite.mean()) if finite.size else float("nan"),
                     "len_found": float(finite.size / m.sum()),
                     "time_mode_mean": float(t_mode[m].mean())})
    return {"rows": rows, "raw": {"bfs": bfs, "d_phi": d_phi, "d_q": dq, "max_q": maxq, "len": seg_len}}


def spearman_within(raw: dict, key: str = "d_phi", max_bfs: int = 10) -> float:
    m = raw["bfs"] <= max_bfs
    return float(spearmanr(raw[key][m], raw["bfs"][m])[0])


def signal_to_noise(rows: list[dict], key: str, bins=range(1, 6)) -> float:
    """|slope of the bin means| divided by the mean within-bin spread."""
    sel = [r for r in rows if r["bfs"] in bins]
    x = np.array([r["bfs"] for r in sel], float)
    y = np.array([r[f"{key}_mean"] for r in sel])
    s = np.array([r[f"{key}_std"] for r in sel])
    slope = np.polyfit(x, y, 1)[0]
    return float(abs(slope) / max(s.mean(), 1e-12))


def step_distance_error(env, q, rng: np.random.Generator, max_bfs: int = 15, per_bin: int = 200) -> float:
    """Mean |step_distance - BFS| over distinct cell pairs with BFS <= max_bfs."""
    from .qlearn import step_distance

    a, b, bfs = calibration_pairs(env, rng, per_bin, max_bfs)
    m = bfs > 0
    cells = np.asarray(env.free_cells, dtype=np.float64)
    d = step_distance(q, env.lifting(cells[a[m]]), env.lifting(cells[b[m]]))
    return float(np.mean(np.abs(d - bfs[m])))


def retrieval_length_curve(env, retriever, rng: np.random.Generator, bins=range(5, 16), per_bin: int = 100) -> dict:
    """Mean retrieved segment length per BFS bin (pairs without a retrieval are counted separately)."""
    a, b, bfs = calibration_pairs(env, rng, per_bin, max(bins))
    cells = np.asarray(env.free_cells, dtype=np.float64)
    oa, ob = env.lifting(cells[a]), env.lifting(cells[b])
    out = {}
    for k in bins:
        lens = []
        for i in np.flatnonzero(bfs == k):
            seg = retriever.obs_pair(oa[i], ob[i])
            if seg is not None:
                lens.append(len(seg))
        out[k] = {"mean_len": float(np.mean(lens)) if lens else float("nan"), "found": len(lens),
                  "pairs": int((bfs == k).sum())}
    return out
