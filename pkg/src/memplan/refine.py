"""Memory refinement: run the roadmap policy toward sampled goals, keep the
rollouts that arrive, and retrain every model from scratch on the result."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .buffer import TrajectoryLog
from .evaluation import replay_segment, sample_eval_pairs
from .policy import execute

log_ = logging.getLogger(__name__)


class InsufficientDataError(RuntimeError):
    pass


class DynamicsViolationError(RuntimeError):
    pass


@dataclass
class RefineConfig:
    rounds: int = 1
    goals_per_round: int = 200
    bands: list[int] = field(default_factory=lambda: list(range(1, 15)))
    budget_multiplier: int = 4
    success_radius: float = 1.0
    mode: str = "euclidean"
    keep_only_successes: bool = True
    match_size: bool = True  # collect until the new data is as large as the original buffer
    max_collect_rounds: int = 1000

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.goals_per_round < 0:
            raise ValueError("goals_per_round must be non-negative")
        if not self.bands:
            raise ValueError("refinement needs at least one distance band")


def _goal_pairs(env, cfg: RefineConfig, rng: np.random.Generator) -> list[tuple]:
    """``goals_per_round`` pairs spread uniformly over the bands (band chosen per pair)."""
    if cfg.goals_per_round == 0:
        return []
    picks = rng.choice(len(cfg.bands), size=cfg.goals_per_round)
    out = []
    for b, count in zip(*np.unique(picks, return_counts=True)):
        n = cfg.bands[int(b)]
        out += [(n, s, g) for s, g in sample_eval_pairs(env, n, int(count), rng, cfg.mode)]
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def check_dynamics(env, episode: TrajectoryLog) -> None:
    for e in range(episode.n_episodes):
        seg = episode.segment(e, 0, int(episode.episode_lengths[e]))
        if not replay_segment(env, episode, seg):
            raise DynamicsViolationError(f"episode {e} does not follow the environment dynamics")


def refinement_round(env, policy, log: TrajectoryLog, cfg: RefineConfig,
                     rng: np.random.Generator) -> tuple[TrajectoryLog, dict]:
    """Execute ``policy`` toward sampled goals and return ``log`` plus the kept rollouts."""
    out = log.copy()
    attempts = successes = 0
    lengths = []
    for n, s0, sg in _goal_pairs(env, cfg, rng):
        res = execute(env, policy, s0, sg, max(1, cfg.budget_multiplier * n), cfg.success_radius)
        attempts += 1
        successes += res.success
        lengths.append(res.steps_taken)
        if res.steps_taken == 0 or (cfg.keep_only_successes and not res.success):
            continue
        check_dynamics(env, res.trajectory)
        o, a, p = res.trajectory.episode(0)
        out.append_episode(o, a, p)
    report = {"attempts": attempts, "successes": successes,
              "success_rate": successes / attempts if attempts else 0.0,
              "mean_executed_len": float(np.mean(lengths)) if lengths else 0.0,
              "appended_episodes": out.n_episodes - log.n_episodes,
              "appended_steps": out.total_steps - log.total_steps}
    return out, report


def truncate_to(data: TrajectoryLog, steps: int) -> TrajectoryLog:
    """First episodes of ``data`` holding exactly ``steps`` transitions.

    The last kept episode loses its beginning rather than its end, so it still
    finishes where the rollout reached its goal.
    """
    if data.total_steps < steps:
        raise InsufficientDataError(f"need {steps} transitions, have {data.total_steps}")
    out = TrajectoryLog(data.obs_dim, data.n_actions, data.pose_dim)
    left = steps
    for e in range(data.n_episodes):
        if left == 0:
            break
        o, a, p = data.episode(e)
        k = min(len(a), left)
        out.append_episode(o[len(a) - k:], a[len(a) - k:], p[len(a) - k:] if data.pose_dim else None)
        left -= k
    return out


def collect_refined(env, policy, initial: TrajectoryLog, cfg: RefineConfig,
                    rng: np.random.Generator) -> tuple[TrajectoryLog, list[dict]]:
    """New training data for one refinement cycle, plus per-round reports.

    With ``match_size`` the data is made only of kept rollouts, gathered round
    after round until there are at least as many transitions as in ``initial``
    and then cut to exactly that many. Without it the rollouts of
    ``cfg.rounds`` rounds are appended to ``initial``.
    """
    if not cfg.match_size:
        data, reports = initial, []
        for _ in range(cfg.rounds):
            data, rep = refinement_round(env, policy, data, cfg, rng)
            reports.append(rep)
        return data, reports
    target = initial.total_steps
    data = TrajectoryLog(initial.obs_dim, initial.n_actions, initial.pose_dim)
    reports = []
    while data.total_steps < target:
        if len(reports) >= cfg.max_collect_rounds or cfg.goals_per_round == 0:
            raise InsufficientDataError(
                f"collected {data.total_steps}/{target} transitions in {len(reports)} rounds")
        data, rep = refinement_round(env, policy, data, cfg, rng)
        reports.append(rep)
        log_.info("refinement round %d: %s (%d/%d steps)", len(reports), rep, data.total_steps, target)
    return truncate_to(data, target), reports


def retrain_all(cfg, data: TrajectoryLog, env=None, min_steps: int = 0):
    """Fresh Q and encoder trained from scratch on ``data`` (pipeline configuration ``cfg``)."""
    from .pipeline import train_all

    if data.total_steps < max(min_steps, 1):
        raise InsufficientDataError(f"retraining needs {max(min_steps, 1)} transitions, got {data.total_steps}")
    return train_all(cfg, data, env)
