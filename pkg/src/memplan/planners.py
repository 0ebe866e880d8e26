"""Sampling-based planners whose edges are retrieved buffer segments.

Vertices are buffer states (global indices). An edge u -> v exists when the
retriever finds a segment from near u to near v no longer than ``r`` steps;
the edge keeps that segment and costs ``-R(segment)`` (its length by
default). Plans are shortest paths over these edges, and the stitched plan is
the concatenation of the edge segments.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .buffer import Segment, TrajectoryLog
from .per import Retriever

START, GOAL = -1, -2


@dataclass
class PlannerConfig:
    r: int = 10
    num_vertices: int = 300
    sampling: str = "uniform"
    iterations: int = 500

    def __post_init__(self):
        if self.r < 0 or self.num_vertices < 0 or self.iterations < 0:
            raise ValueError("planner settings must be non-negative")
        if self.sampling not in ("uniform", "visitation"):
            raise ValueError(f"unknown vertex sampling {self.sampling!r}")


@dataclass
class Edge:
    cost: float
    segment: Segment | None = None
    claim: float = 0.0  # the reach the planner asserted when adding the edge


@dataclass
class Roadmap:
    vertices: list[int]
    edges: dict[tuple[int, int], Edge] = field(default_factory=dict)
    r: float = 0.0
    kind: str = "rprm"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def mean_degree(self) -> float:
        return len(self.edges) / max(self.n_vertices, 1)

    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        adj: dict[int, list[tuple[int, float]]] = {k: [] for k in range(self.n_vertices)}
        for (u, v), e in sorted(self.edges.items()):
            adj[u].append((v, e.cost))
        return adj

    def to_json(self, log: TrajectoryLog | None = None) -> dict:
        poses = log.poses if log is not None and log.pose_dim else None
        verts = []
        for k, g in enumerate(self.vertices):
            item = {"id": k, "state": int(g)}
            if poses is not None:
                item["pose"] = [float(x) for x in poses[g]]
            verts.append(item)
        edges = [{"u": u, "v": v, "cost": e.cost, "length": None if e.segment is None else len(e.segment)}
                 for (u, v), e in sorted(self.edges.items())]
        return {"kind": self.kind, "r": self.r, "vertices": verts, "edges": edges}


def save_roadmap(roadmap: Roadmap, path, log: TrajectoryLog | None = None) -> None:
    payload = roadmap.to_json(log)
    payload["edge_segments"] = [None if e.segment is None else list(e.segment.key())
                                for _, e in sorted(roadmap.edges.items())]
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_roadmap(path, log: TrajectoryLog) -> Roadmap:
    with open(path) as fh:
        payload = json.load(fh)
    rm = Roadmap([v["state"] for v in payload["vertices"]], r=payload["r"], kind=payload["kind"])
    for e, key in zip(payload["edges"], payload["edge_segments"]):
        seg = None if key is None else log.segment(*key)
        rm.edges[(e["u"], e["v"])] = Edge(e["cost"], seg, payload["r"])
    return rm


# -- vertex sampling -------------------------------------------------------------
def visitation_weights(retriever: Retriever) -> np.ndarray:
    """``1 / (1 + visitation count)`` for every buffer state (exact radius counts via a k-d tree)."""
    from scipy.spatial import cKDTree

    z = retriever.index.z
    counts = cKDTree(z).query_ball_point(z, retriever.cfg.d_p, return_length=True)
    return 1.0 / (1.0 + np.asarray(counts, dtype=np.float64))


def sample_vertex(log: TrajectoryLog, rng: np.random.Generator, sampling: str = "uniform",
                  weights: np.ndarray | None = None) -> int:
    if log.n_states == 0:
        raise ValueError("cannot sample a vertex from an empty buffer")
    if sampling == "uniform":
        return int(rng.integers(log.n_states))
    if weights is None:
        raise ValueError("visitation sampling needs precomputed weights")
    return int(rng.choice(log.n_states, p=weights / weights.sum()))


def sample_vertices(retriever: Retriever, cfg: PlannerConfig, rng: np.random.Generator) -> list[int]:
    log = retriever.log
    n = min(cfg.num_vertices, log.n_states)
    if cfg.sampling == "uniform":
        return sorted(int(v) for v in rng.choice(log.n_states, n, replace=False))
    w = visitation_weights(retriever)
    return sorted(int(v) for v in rng.choice(log.n_states, n, replace=False, p=w / w.sum()))


# -- shortest paths --------------------------------------------------------------
def shortest_path(adj: dict, src, dst) -> tuple[list, float] | None:
    """Dijkstra; equal-cost frontier ties pop the lowest vertex id first."""
    for u, nbrs in adj.items():
        for v, w in nbrs:
            if w < 0:
                raise ValueError(f"negative edge cost {w} on ({u}, {v})")
    dist = {src: 0.0}
    prev = {src: None}
    heap = [(0.0, _order(src), src)]
    done = set()
    while heap:
        d, _, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            path = [u]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1], d
        for v, w in adj.get(u, ()):
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, _order(v), v))
    return None


def _order(v) -> tuple:
    # start/goal sentinels are negative; keep the ordering total and deterministic
    return (v < 0, abs(v))


# -- R-PRM -----------------------------------------------------------------------
def prefilter_radius(retriever: Retriever, r: float) -> float:
    """Embedding radius that provably contains every pair reachable within ``r`` steps.

    A retrieved segment starts within d_p of u, ends within d_p of v and every
    transition moves the embedding by at most ``step_scale``.
    """
    return 2.0 * retriever.cfg.d_p + r * retriever.index.step_scale


def _candidates(z: np.ndarray, zq: np.ndarray, radius: float) -> np.ndarray:
    return np.flatnonzero(np.linalg.norm(z - zq, axis=1) <= radius)


def rprm_build(retriever: Retriever, cfg: PlannerConfig, rng: np.random.Generator,
               vertices: list[int] | None = None) -> Roadmap:
    """Roadmap over sampled buffer states; each direction is a separate retrieval."""
    verts = list(vertices) if vertices is not None else sample_vertices(retriever, cfg, rng)
    rm = Roadmap(verts, r=cfg.r, kind="rprm")
    if not verts:
        return rm
    zv = retriever.index.z[verts]
    radius = prefilter_radius(retriever, cfg.r)
    for a in range(len(verts)):
        for b in _candidates(zv, zv[a], radius):
            b = int(b)
            if a == b:
                continue
            seg = retriever.buffer_pair(verts[a], verts[b])
            if seg is not None and len(seg) <= cfg.r:
                rm.edges[(a, b)] = Edge(retriever.cost(seg), seg, cfg.r)
    return rm


@dataclass
class StitchedTrajectory:
    path: list[int]
    segments: list[Segment]

    @property
    def total_len(self) -> int:
        return sum(len(s) for s in self.segments)

    def total_cost(self, retriever: Retriever) -> float:
        return sum(retriever.cost(s) for s in self.segments)

    def states(self) -> np.ndarray:
        """Global indices of the stitched states; each junction keeps both sides."""
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.global_indices for s in self.segments])

    def actions(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.actions for s in self.segments]).astype(np.int64)


def all_pairs_shortest(n: int, edges: dict[tuple[int, int], Edge]) -> tuple[np.ndarray, np.ndarray]:
    """Floyd-Warshall: distance matrix and next-hop matrix (-1 where unreachable)."""
    dist = np.full((n, n), np.inf)
    nxt = np.full((n, n), -1, dtype=np.int64)
    for (u, v), e in edges.items():
        if e.cost < 0:
            raise ValueError(f"negative edge cost {e.cost} on ({u}, {v})")
        if e.cost < dist[u, v]:
            dist[u, v], nxt[u, v] = e.cost, v
    idx = np.arange(n)
    dist[idx, idx], nxt[idx, idx] = 0.0, idx
    for k in range(n):
        via = dist[:, k:k + 1] + dist[k:k + 1, :]
        better = via < dist
        if better.any():
            dist = np.where(better, via, dist)
            nxt = np.where(better, nxt[:, k:k + 1], nxt)
    return dist, nxt


def _hops(nxt: np.ndarray, a: int, b: int) -> list[int]:
    path = [a]
    while path[-1] != b:
        path.append(int(nxt[path[-1], b]))
    return path


def forward_gaps(log: TrajectoryLog, starts: np.ndarray, limit: int) -> np.ndarray:
    """For every state j: the smallest j - i over i in ``starts`` of the same episode, capped at ``limit``."""
    gap = np.full(log.n_states, np.inf)
    ep, n = log.episode_of, log.n_states
    for k in range(limit + 1):
        j = starts + k
        j = j[j < n]
        i = j - k
        j = j[(ep[i] == ep[j]) & (gap[j] > k)]
        gap[j] = k
    return gap


def backward_gaps(log: TrajectoryLog, ends: np.ndarray, limit: int) -> np.ndarray:
    """For every state i: the smallest j - i over j in ``ends`` of the same episode, capped at ``limit``."""
    gap = np.full(log.n_states, np.inf)
    ep = log.episode_of
    for k in range(limit + 1):
        i = ends - k
        i = i[i >= 0]
        j = i + k
        i = i[(ep[i] == ep[j]) & (gap[i] > k)]
        gap[i] = k
    return gap


class RoadmapPlanner:
    """Answers start/goal queries on a finished roadmap.

    Vertex-to-vertex distances are precomputed once. A query only has to find
    which vertices the start can reach and which can reach the goal within
    ``r`` steps; segments are retrieved for the edges of the chosen path only.
    """

    def __init__(self, roadmap: Roadmap, retriever: Retriever):
        self.roadmap, self.retriever = roadmap, retriever
        n = roadmap.n_vertices
        self.dist, self.next = all_pairs_shortest(n, roadmap.edges)
        nbrs = [retriever.neighbors_of(v) for v in roadmap.vertices]
        self._vn_idx = np.concatenate(nbrs) if nbrs else np.zeros(0, dtype=np.int64)
        self._vn_start = np.cumsum([0] + [len(x) for x in nbrs[:-1]]).astype(np.int64)
        self._goal_cache: tuple | None = None
        self._fast = retriever.cfg.reward_mode == "neg_length"

    @property
    def limit(self) -> int:
        return int(min(self.roadmap.r, self.retriever.cfg.l_max))

    def query_obs(self, s_c, s_g) -> StitchedTrajectory | None:
        key = np.asarray(s_g, dtype=np.float32).tobytes()
        if self._goal_cache is None or self._goal_cache[0] != key:
            g_nbrs = self.retriever.neighbors_of_obs(s_g)
            self._goal_cache = (key, g_nbrs, self._goal_costs(g_nbrs))
        _, g_nbrs, cost_to_goal = self._goal_cache
        return self._solve(self.retriever.neighbors_of_obs(s_c), g_nbrs, cost_to_goal)

    def query_states(self, gc: int, gg: int) -> StitchedTrajectory | None:
        g_nbrs = self.retriever.neighbors_of(gg)
        return self._solve(self.retriever.neighbors_of(gc), g_nbrs, self._goal_costs(g_nbrs))

    def _vertex_min(self, per_state: np.ndarray) -> np.ndarray:
        if self.roadmap.n_vertices == 0:
            return np.zeros(0)
        return np.minimum.reduceat(per_state[self._vn_idx], self._vn_start)

    def _start_costs(self, c_nbrs) -> np.ndarray:
        if self._fast:
            return self._vertex_min(forward_gaps(self.retriever.log, c_nbrs, self.limit))
        return self._slow_costs(lambda v: self.retriever.between(c_nbrs, self.retriever.neighbors_of(v)))

    def _goal_costs(self, g_nbrs) -> np.ndarray:
        if self._fast:
            return self._vertex_min(backward_gaps(self.retriever.log, g_nbrs, self.limit))
        return self._slow_costs(lambda v: self.retriever.between(self.retriever.neighbors_of(v), g_nbrs))

    def _slow_costs(self, fetch) -> np.ndarray:
        out = np.full(self.roadmap.n_vertices, np.inf)
        for k, v in enumerate(self.roadmap.vertices):
            seg = fetch(v)
            if seg is not None and len(seg) <= self.roadmap.r:
                out[k] = self.retriever.cost(seg)
        return out

    def _solve(self, c_nbrs, g_nbrs, cost_to_goal) -> StitchedTrajectory | None:
        ret = self.retriever
        direct = ret.between(c_nbrs, g_nbrs)
        direct_cost = ret.cost(direct) if direct is not None and len(direct) <= self.roadmap.r else np.inf
        best, pair = np.inf, None
        if self.roadmap.n_vertices:
            total = self._start_costs(c_nbrs)[:, None] + self.dist + cost_to_goal[None, :]
            flat = int(np.argmin(total))
            best = float(total.flat[flat])
            pair = divmod(flat, self.roadmap.n_vertices)
        if not np.isfinite(best) and not np.isfinite(direct_cost):
            return None
        if direct_cost <= best:
            return StitchedTrajectory([START, GOAL], [direct])
        a, b = pair
        hops = _hops(self.next, a, b)
        verts = self.roadmap.vertices
        segs = [ret.between(c_nbrs, ret.neighbors_of(verts[a]))]
        segs += [self.roadmap.edges[(u, v)].segment for u, v in zip(hops[:-1], hops[1:])]
        segs.append(ret.between(ret.neighbors_of(verts[b]), g_nbrs))
        return StitchedTrajectory([START, *hops, GOAL], segs)


def rprm_query(roadmap: Roadmap, retriever: Retriever, s_c, s_g) -> StitchedTrajectory | None:
    return RoadmapPlanner(roadmap, retriever).query_obs(s_c, s_g)


# -- Q-threshold baseline ----------------------------------------------------------
def baseline_q_roadmap(retriever: Retriever, q, threshold: float, cfg: PlannerConfig, rng: np.random.Generator,
                       vertices: list[int] | None = None) -> Roadmap:
    """Edge u -> v whenever d_Q(u, v) <= threshold; no segments, cost d_Q."""

    verts = list(vertices) if vertices is not None else sample_vertices(retriever, cfg, rng)
    rm = Roadmap(verts, r=threshold, kind="q-threshold")
    dq = vertex_dq(q, retriever.log, verts)
    for a, b in zip(*np.nonzero(dq <= threshold)):
        if a != b:
            rm.edges[(int(a), int(b))] = Edge(float(dq[a, b]), None, threshold)
    return rm


def vertex_dq(q, log: TrajectoryLog, verts: list[int]) -> np.ndarray:
    from .qlearn import d_q_keys

    keys = q.log_keys(log)[verts]
    n = len(verts)
    if n == 0:
        return np.zeros((0, 0))
    s = np.repeat(np.arange(n), n)
    g = np.tile(np.arange(n), n)
    return d_q_keys(q, keys[s], keys[g]).reshape(n, n)


def match_threshold(q, log: TrajectoryLog, verts: list[int], n_edges: int) -> float:
    """Smallest d_Q threshold that yields at least ``n_edges`` directed edges among ``verts``."""
    dq = vertex_dq(q, log, verts)
    off = dq[~np.eye(len(verts), dtype=bool)]
    if n_edges <= 0 or off.size == 0:
        return 0.0
    return float(np.sort(off)[min(n_edges, off.size) - 1])


# -- R-RRT / R-RRT* -----------------------------------------------------------------
@dataclass
class RrtTree:
    nodes: list[int]
    parent: list[int]
    cost: list[float]
    segments: list[Segment | None]

    @classmethod
    def rooted(cls, root: int) -> "RrtTree":
        return cls([root], [-1], [0.0], [None])

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, node: int, parent: int, seg: Segment, edge_cost: float) -> int:
        self.nodes.append(node)
        self.parent.append(parent)
        self.cost.append(self.cost[parent] + edge_cost)
        self.segments.append(seg)
        return len(self.nodes) - 1

    def children(self, k: int) -> list[int]:
        return [c for c, p in enumerate(self.parent) if p == k]

    def ancestors(self, k: int) -> set[int]:
        out = set()
        while self.parent[k] >= 0:
            k = self.parent[k]
            out.add(k)
        return out

    def recomputed_costs(self, edge_cost) -> list[float]:
        out = [0.0] * len(self)
        for k in range(1, len(self)):
            chain = [k]
            while self.parent[chain[-1]] > 0:
                chain.append(self.parent[chain[-1]])
            out[k] = sum(edge_cost(self.segments[c]) for c in chain)
        return out


def _nearest(retriever: Retriever, tree: RrtTree, target: int, radius: float):
    """Tree node with the shortest retrievable segment to ``target`` (ties: lowest node)."""
    z = retriever.index.z
    zt = z[tree.nodes]
    best = None
    for k in _candidates(zt, z[target], radius):
        seg = retriever.buffer_pair(tree.nodes[k], target)
        if seg is not None and (best is None or len(seg) < len(best[1])):
            best = (int(k), seg)
    return best


def _steer(seg: Segment, r: int) -> int:
    """The r-th state of the segment, clipped to its last state."""
    return int(seg.global_start + min(r, len(seg)))


def rrt_build(retriever: Retriever, cfg: PlannerConfig, s_init: int, rng: np.random.Generator,
              star: bool = False, samples: list[int] | None = None) -> RrtTree:
    """Grow a tree from buffer state ``s_init``; ``star`` enables choose-parent and rewiring."""
    tree = RrtTree.rooted(int(s_init))
    in_tree = {int(s_init): 0}
    z = retriever.index.z
    near_radius = prefilter_radius(retriever, cfg.r)
    search_radius = prefilter_radius(retriever, retriever.cfg.l_max)
    weights = visitation_weights(retriever) if cfg.sampling == "visitation" else None
    for it in range(cfg.iterations):
        s_rand = samples[it] if samples is not None else sample_vertex(retriever.log, rng, cfg.sampling, weights)
        found = _nearest(retriever, tree, s_rand, search_radius)
        if found is None:
            continue
        k_near, seg = found
        s_new = _steer(seg, cfg.r)
        if s_new in in_tree:
            continue
        edge = retriever.buffer_pair(tree.nodes[k_near], s_new)
        if edge is None or len(edge) > cfg.r:
            continue
        parent, best = k_near, edge
        if star:
            near = []
            for k in _candidates(z[tree.nodes], z[s_new], near_radius):
                k = int(k)
                e = edge if k == k_near else retriever.buffer_pair(tree.nodes[k], s_new)
                if e is not None and len(e) <= cfg.r:
                    near.append((k, e))
            for k, e in near:
                if tree.cost[k] + retriever.cost(e) < tree.cost[parent] + retriever.cost(best):
                    parent, best = k, e
        k_new = tree.add(s_new, parent, best, retriever.cost(best))
        in_tree[s_new] = k_new
        if star:
            _rewire(retriever, tree, k_new, [k for k, _ in near], cfg.r)
    return tree


def rrt_star_build(retriever: Retriever, cfg: PlannerConfig, s_init: int, rng: np.random.Generator,
                   samples: list[int] | None = None) -> RrtTree:
    return rrt_build(retriever, cfg, s_init, rng, star=True, samples=samples)


def _rewire(retriever: Retriever, tree: RrtTree, k_new: int, near: list[int], r: int) -> None:
    blocked = tree.ancestors(k_new) | {k_new}
    for k in near:
        if k in blocked:
            continue
        e = retriever.buffer_pair(tree.nodes[k_new], tree.nodes[k])
        if e is None or len(e) > r:
            continue
        c = retriever.cost(e)
        if tree.cost[k_new] + c < tree.cost[k]:
            delta = tree.cost[k_new] + c - tree.cost[k]
            tree.parent[k], tree.segments[k] = k_new, e
            stack = [k]
            while stack:
                u = stack.pop()
                tree.cost[u] += delta
                stack.extend(tree.children(u))


def rrt_samples(log: TrajectoryLog, n: int, rng: np.random.Generator) -> list[int]:
    """Pre-drawn uniform samples, so paired RRT/RRT* runs see the same sequence."""
    return [int(v) for v in rng.integers(log.n_states, size=n)]
