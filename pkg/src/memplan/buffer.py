"""Replay buffer: episodic trajectory storage with global state indexing.

States are numbered globally in episode order. An episode with ``n``
transitions owns ``n + 1`` consecutive global state indices, so a log holds
``total_steps + n_episodes`` states. The action stored at a global index is
the action taken *from* that state (``-1`` on the last state of an episode).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"PLOG"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIII")  # magic, version, flags, obs_dim, n_actions, pose_dim, n_episodes


class BufferError(ValueError):
    pass


class ContiguityError(BufferError):
    """A transition chain whose next-observation does not match the following observation."""


class LogFormatError(BufferError):
    pass


class CorruptHeaderError(LogFormatError):
    pass


class LogVersionError(LogFormatError):
    pass


class TruncatedLogError(LogFormatError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    next_obs: np.ndarray
    episode_id: int = -1
    step_index: int = -1
    global_index: int = -1


@dataclass(frozen=True)
class Segment:
    """Contiguous slice ``[start, end]`` (step indices) of one episode."""

    episode_id: int
    start: int
    end: int
    global_start: int
    obs: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def global_end(self) -> int:
        return self.global_start + len(self)

    @property
    def global_indices(self) -> np.ndarray:
        return np.arange(self.global_start, self.global_end + 1)

    def key(self) -> tuple[int, int, int]:
        return (self.episode_id, self.start, self.end)


class TrajectoryLog:
    """The replay buffer M.

    ``poses`` carries ground-truth agent states for evaluation code; learners
    only ever read ``obs`` and ``actions``.
    """

    def __init__(self, obs_dim: int, n_actions: int, pose_dim: int = 0):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.pose_dim = int(pose_dim)
        self._obs: list[np.ndarray] = []
        self._actions: list[np.ndarray] = []
        self._poses: list[np.ndarray] = []
        self._flat: dict | None = None

    # -- construction -----------------------------------------------------
    def append_episode(self, obs, actions, poses=None) -> int:
        obs = np.ascontiguousarray(obs, dtype=np.float32)
        actions = np.ascontiguousarray(actions, dtype=np.int32).reshape(-1)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise BufferError(f"observations must have shape (n+1, {self.obs_dim}), got {obs.shape}")
        if obs.shape[0] != actions.shape[0] + 1:
            raise BufferError("an episode with n actions needs n + 1 observations")
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise BufferError("action index out of range")
        if not np.all(np.isfinite(obs)):
            raise BufferError("observations must be finite")
        if self.pose_dim:
            if poses is None:
                raise BufferError("this log stores poses; pass them with every episode")
            poses = np.ascontiguousarray(poses, dtype=np.float32).reshape(obs.shape[0], self.pose_dim)
        else:
            poses = np.zeros((obs.shape[0], 0), dtype=np.float32)
        self._obs.append(obs)
        self._actions.append(actions)
        self._poses.append(poses)
        self._flat = None
        return len(self._obs) - 1

    def copy(self) -> "TrajectoryLog":
        out = TrajectoryLog(self.obs_dim, self.n_actions, self.pose_dim)
        for o, a, p in zip(self._obs, self._actions, self._poses):
            out.append_episode(o, a, p if self.pose_dim else None)
        return out

    # -- sizes --------------------------------------------------------------
    @property
    def n_episodes(self) -> int:
        return len(self._obs)

    @property
    def episode_lengths(self) -> np.ndarray:
        return np.array([a.shape[0] for a in self._actions], dtype=np.int64)

    @property
    def total_steps(self) -> int:
        return int(self.episode_lengths.sum()) if self._actions else 0

    @property
    def n_states(self) -> int:
        return self.total_steps + self.n_episodes

    def __len__(self) -> int:
        return self.n_states

    # -- flat views ---------------------------------------------------------
    def _flatten(self) -> dict:
        if self._flat is None:
            lengths = self.episode_lengths
            starts = np.zeros(len(lengths), dtype=np.int64)
            if len(lengths) > 1:
                starts[1:] = np.cumsum(lengths + 1)[:-1]
            if self._obs:
                obs = np.concatenate(self._obs)
                poses = np.concatenate(self._poses)
                acts = np.concatenate([np.append(a, -1) for a in self._actions]).astype(np.int32)
                episode_of = np.repeat(np.arange(len(lengths)), lengths + 1)
                step_of = np.concatenate([np.arange(n + 1) for n in lengths])
                ends = starts + lengths
            else:
                obs = np.zeros((0, self.obs_dim), np.float32)
                poses = np.zeros((0, self.pose_dim), np.float32)
                acts = np.zeros(0, np.int32)
                episode_of = step_of = ends = np.zeros(0, np.int64)
            self._flat = dict(
                obs=obs, poses=poses, actions=acts, starts=starts, ends=ends,
                episode_of=episode_of, step_of=step_of, episode_end=ends[episode_of] if len(ends) else ends,
            )
        return self._flat

    @property
    def obs(self) -> np.ndarray:
        return self._flatten()["obs"]

    @property
    def poses(self) -> np.ndarray:
        return self._flatten()["poses"]

    @property
    def actions(self) -> np.ndarray:
        return self._flatten()["actions"]

    @property
    def episode_starts(self) -> np.ndarray:
        return self._flatten()["starts"]

    @property
    def episode_of(self) -> np.ndarray:
        return self._flatten()["episode_of"]

    @property
    def step_of(self) -> np.ndarray:
        return self._flatten()["step_of"]

    @property
    def episode_end(self) -> np.ndarray:
        """Global index of the last state of each state's episode."""
        return self._flatten()["episode_end"]

    def transition_indices(self) -> np.ndarray:
        """Global indices of states that have an outgoing transition."""
        return np.flatnonzero(self.actions >= 0)

    def global_index(self, episode_id: int, step: int) -> int:
        return int(self.episode_starts[episode_id] + step)

    def episode(self, episode_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._obs[episode_id], self._actions[episode_id], self._poses[episode_id]

    def transitions(self, episode_id: int) -> Iterator[Transition]:
        obs, acts, _ = self.episode(episode_id)
        g0 = self.global_index(episode_id, 0)
        for k, a in enumerate(acts):
            yield Transition(obs[k], int(a), obs[k + 1], episode_id, k, g0 + k)

    def segment(self, episode_id: int, i: int, j: int) -> Segment:
        if not 0 <= episode_id < self.n_episodes:
            raise IndexError(f"no episode {episode_id}")
        n = self._actions[episode_id].shape[0]
        if not (0 <= i <= j <= n):
            raise IndexError(f"segment [{i}, {j}] outside episode of length {n}")
        obs, acts, _ = self.episode(episode_id)
        return Segment(episode_id, i, j, self.global_index(episode_id, i), obs[i:j + 1], acts[i:j])

    def segment_global(self, gi: int, gj: int) -> Segment:
        e = int(self.episode_of[gi])
        if int(self.episode_of[gj]) != e:
            raise IndexError("segment endpoints lie in different episodes")
        s0 = int(self.episode_starts[e])
        return self.segment(e, gi - s0, gj - s0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryLog):
            return NotImplemented
        if (self.obs_dim, self.n_actions, self.pose_dim, self.n_episodes) != (
            other.obs_dim, other.n_actions, other.pose_dim, other.n_episodes):
            return False
        return all(
            np.array_equal(a, b)
            for mine, theirs in ((self._obs, other._obs), (self._actions, other._actions), (self._poses, other._poses))
            for a, b in zip(mine, theirs)
        )

    __hash__ = None


def append_trajectory(log: TrajectoryLog, transitions: Sequence[Transition], poses=None) -> TrajectoryLog:
    """Append a contiguous run of transitions as a new episode."""
    if len(transitions) == 0:
        raise BufferError("cannot append an empty run")
    for k in range(len(transitions) - 1):
        if not np.array_equal(transitions[k].next_obs, transitions[k + 1].obs):
            raise ContiguityError(f"transition {k} does not chain into transition {k + 1}")
    obs = [transitions[0].obs] + [t.next_obs for t in transitions]
    log.append_episode(np.stack(obs), [t.action for t in transitions], poses)
    return log


# -- hindsight sampling --------------------------------------------------------
@dataclass
class HindsightBatch:
    """Global state indices of (s_t, s_{t+1}, s_g) plus the action and offset T."""

    t: np.ndarray
    t_next: np.ndarray
    goal: np.ndarray
    action: np.ndarray
    offset: np.ndarray


def sample_hindsight(log: TrajectoryLog, batch: int, rng: np.random.Generator, mode: str = "geometric",
                     p: float = 0.1, t_max: int = 10) -> HindsightBatch:
    """Sample transitions with relabelled goals from later in the same episode.

    ``geometric``: T ~ Geom(p) (support 1, 2, ...).
    ``encoder``: half the rows draw T ~ U{0..t_max}, the rest T ~ U{t_max+1..remaining}
    (all rows are near ones when no episode is longer than ``t_max``).
    Rows whose goal would fall past the episode end are redrawn.
    """
    if mode not in ("geometric", "encoder"):
        raise ValueError(f"unknown hindsight mode {mode!r}")
    candidates = log.transition_indices()
    if candidates.size == 0:
        raise BufferError("log has no episode with at least one transition")
    end = log.episode_end
    t = np.empty(batch, dtype=np.int64)
    T = np.empty(batch, dtype=np.int64)
    near = rng.random(batch) < 0.5 if mode == "encoder" else None
    if mode == "encoder" and not np.any(end[candidates] - candidates > t_max):
        near[:] = True  # every episode is too short for a far goal
    todo = np.arange(batch)
    while todo.size:
        tt = candidates[rng.integers(0, candidates.size, size=todo.size)]
        remaining = end[tt] - tt
        if mode == "geometric":
            TT = rng.geometric(p, size=todo.size)
            ok = TT <= remaining
        else:
            lo = np.where(near[todo], 0, t_max + 1)
            hi = np.where(near[todo], t_max, remaining)
            ok = hi >= lo
            TT = lo + np.floor(rng.random(todo.size) * (np.maximum(hi, lo) - lo + 1)).astype(np.int64)
            ok &= TT <= remaining
        t[todo[ok]] = tt[ok]
        T[todo[ok]] = TT[ok]
        todo = todo[~ok]
    return HindsightBatch(t=t, t_next=t + 1, goal=t + T, action=log.actions[t].astype(np.int64), offset=T)


# -- binary format ---------------------------------------------------------------
def save(log: TrajectoryLog, path) -> None:
    """Write ``log`` as a versioned little-endian binary file (``.plog``)."""
    lengths = log.episode_lengths.astype("<u8")
    payload = bytearray()
    for e in range(log.n_episodes):
        obs, acts, poses = log.episode(e)
        payload += obs.astype("<f4").tobytes()
        payload += acts.astype("<i4").tobytes()
        payload += poses.astype("<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, 0, log.obs_dim, log.n_actions, log.pose_dim, log.n_episodes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(lengths.tobytes())
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(bytes(payload))
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load(path) -> TrajectoryLog:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptHeaderError(f"{path}: file too short for a log header")
    magic, version, _flags, obs_dim, n_actions, pose_dim, n_ep = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise LogVersionError(f"{path}: log version {version}, this reader understands {VERSION}")
    off = _HEADER.size
    if len(data) < off + 8 * n_ep + 8:
        raise TruncatedLogError(f"{path}: episode table truncated")
    lengths = np.frombuffer(data, dtype="<u8", count=n_ep, offset=off).astype(np.int64)
    off += 8 * n_ep
    (n_payload,) = struct.unpack_from("<Q", data, off)
    off += 8
    expected = int(np.sum((lengths + 1) * 4 * (obs_dim + pose_dim) + lengths * 4))
    if n_payload != expected:
        raise CorruptHeaderError(f"{path}: payload size {n_payload} disagrees with episode table ({expected})")
    if len(data) < off + n_payload + 4:
        raise TruncatedLogError(f"{path}: expected {n_payload} payload bytes, file is short")
    payload = data[off:off + n_payload]
    (crc,) = struct.unpack_from("<I", data, off + n_payload)
    if zlib.crc32(payload) != crc:
        raise LogFormatError(f"{path}: checksum mismatch")
    log = TrajectoryLog(obs_dim, n_actions, pose_dim)
    pos = 0
    for n in lengths:
        n = int(n)
        obs = np.frombuffer(payload, "<f4", (n + 1) * obs_dim, pos).reshape(n + 1, obs_dim)
        pos += obs.nbytes
        acts = np.frombuffer(payload, "<i4", n, pos)
        pos += acts.nbytes
        poses = np.frombuffer(payload, "<f4", (n + 1) * pose_dim, pos).reshape(n + 1, pose_dim)
        pos += poses.nbytes
        log.append_episode(obs, acts, poses if pose_dim else None)
    return log


def info(log: TrajectoryLog) -> dict:
    return {
        "episodes": log.n_episodes,
        "steps": log.total_steps,
        "states": log.n_states,
        "obs_dim": log.obs_dim,
        "n_actions": log.n_actions,
        "pose_dim": log.pose_dim,
    }


def concat_logs(logs: Iterable[TrajectoryLog]) -> TrajectoryLog:
    logs = list(logs)
    out = TrajectoryLog(logs[0].obs_dim, logs[0].n_actions, logs[0].pose_dim)
    for lg in logs:
        for e in range(lg.n_episodes):
            o, a, p = lg.episode(e)
            out.append_episode(o, a, p if lg.pose_dim else None)
    return out
