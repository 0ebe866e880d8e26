"""Execution policies and the rollout engine.

Policies map (observation, goal observation) to an action and never see the
ground-truth pose. ``execute`` is the only place that does: it checks the
success radius and records the trajectory so it can be appended to the buffer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .buffer import TrajectoryLog
from .per import Retriever
from .planners import RoadmapPlanner


def greedy_action(q, obs, goal) -> int:
    """argmax_a Q(obs, a, goal); ``np.argmax`` already picks the lowest index on ties."""
    return int(np.argmax(q.values(obs, goal)[0]))


class GreedyQ:
    name = "greedy-q"

    def __init__(self, q):
        self.q = q

    def reset(self) -> None:
        pass

    def act(self, obs, goal) -> tuple[int, dict]:
        return greedy_action(self.q, obs, goal), {}


def _first_moving_target(q, obs, states: np.ndarray, obs_table: np.ndarray, start: int = 1):
    """First state of ``states`` from position ``start`` whose observation differs from ``obs``.

    Buffer segments can contain wall bumps that repeat an observation; aiming at
    a copy of the current state would make the agent bump forever.
    """
    here = q.keys(np.atleast_2d(obs))
    for k in range(start, len(states)):
        cand = obs_table[states[k]]
        if not q.same(here, q.keys(np.atleast_2d(cand)))[0]:
            return cand, k
    return None, None


class PerMPC:
    """Retrieve a segment toward the goal every step and chase its next state with Q."""

    name = "per-mpc"

    def __init__(self, q, retriever: Retriever):
        self.q, self.retriever = q, retriever

    def reset(self) -> None:
        pass

    def act(self, obs, goal) -> tuple[int, dict]:
        seg = self.retriever.obs_pair(obs, goal)
        if seg is None:
            return greedy_action(self.q, obs, goal), {"fallback": "no-retrieval"}
        if len(seg) == 0:
            return greedy_action(self.q, obs, goal), {"fallback": "zero-length"}
        target, _ = _first_moving_target(self.q, obs, seg.global_indices, self.retriever.log.obs)
        if target is None:
            return greedy_action(self.q, obs, goal), {"fallback": "no-moving-state"}
        return greedy_action(self.q, obs, target), {"segment": list(seg.key())}


class RoadmapMPC:
    """Replan over the roadmap and chase the stitched plan; falls back to ``PerMPC``."""

    name = "roadmap-mpc"

    def __init__(self, q, planner: RoadmapPlanner, replan_every: int = 1):
        if replan_every < 1:
            raise ValueError("replan_every must be at least 1")
        self.q, self.planner, self.replan_every = q, planner, replan_every
        self.local = PerMPC(q, planner.retriever)
        self.reset()

    def reset(self) -> None:
        self._target, self._age = None, 0

    def act(self, obs, goal) -> tuple[int, dict]:
        due = self._target is None or self._age >= self.replan_every
        if not due and self.q.same(self.q.keys(np.atleast_2d(obs)), self.q.keys(np.atleast_2d(self._target)))[0]:
            due = True
        if due:
            plan = self.planner.query_obs(obs, goal)
            if plan is None:
                self._target = None
                action, flags = self.local.act(obs, goal)
                return action, {**flags, "fallback_plan": "no-plan"}
            states = plan.states()
            if plan.total_len == 0:
                self._target = None
                return greedy_action(self.q, obs, goal), {"fallback": "zero-length"}
            target, _ = _first_moving_target(self.q, obs, states, self.planner.retriever.log.obs,
                                             start=min(self.replan_every, len(states) - 1))
            if target is None:
                target, _ = _first_moving_target(self.q, obs, states, self.planner.retriever.log.obs)
            if target is None:
                self._target = None
                return greedy_action(self.q, obs, goal), {"fallback": "no-moving-state"}
            self._target, self._age = target, 0
        self._age += 1
        return greedy_action(self.q, obs, self._target), {}


class RandomPolicy:
    name = "random"

    def __init__(self, n_actions: int, seed: int = 0):
        self.n_actions, self.seed = n_actions, seed
        self.reset()

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def act(self, obs, goal) -> tuple[int, dict]:
        return int(self.rng.integers(self.n_actions)), {}


@dataclass
class RolloutResult:
    trajectory: TrajectoryLog
    success: bool
    steps_taken: int
    goal: np.ndarray
    trace: list[dict] = field(default_factory=list)

    def fallback_steps(self) -> int:
        return sum(1 for t in self.trace if any(k.startswith("fallback") for k in t))


def _reached(env, state, goal_state, radius: float) -> bool:
    a = np.asarray(state.pose, dtype=np.float64)
    b = np.asarray(goal_state.pose, dtype=np.float64)
    return float(np.linalg.norm(a - b)) <= radius


def execute(env, policy, s0, s_goal, budget: int, success_radius: float | None = None) -> RolloutResult:
    """Roll ``policy`` out from ``s0`` until it is within the success radius or the budget runs out."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    radius = getattr(env.spec, "delta", 1.0) if success_radius is None else success_radius
    policy.reset()
    goal_obs = env.observe(s_goal)
    state = s0
    obs_list, poses, actions, trace = [env.observe(state)], [env.pose_array(state)], [], []
    success = _reached(env, state, s_goal, radius)
    steps = 0
    while not success and steps < budget:
        action, flags = policy.act(obs_list[-1], goal_obs)
        state, collided = env.step(state, action)
        steps += 1
        actions.append(action)
        obs_list.append(env.observe(state))
        poses.append(env.pose_array(state))
        trace.append({"step": steps, "action": int(action), "pose": [float(v) for v in poses[-1]],
                      "collided": bool(collided), **flags})
        success = _reached(env, state, s_goal, radius)
    log = TrajectoryLog(len(obs_list[0]), env.n_actions, len(poses[0]))
    log.append_episode(np.stack(obs_list), np.asarray(actions, dtype=np.int64), np.stack(poses))
    return RolloutResult(log, success, steps, goal_obs, trace)


def dump_trace(result: RolloutResult, path) -> None:
    with open(path, "w") as fh:
        for row in result.trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
