"""End-to-end acceptance suite: eleven criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are written
straight to the terminal even when output capture is on.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import bellman_ford, brute_force_pair, value_iteration
from memplan import evaluation as ev
from memplan.buffer import TrajectoryLog
from memplan.config import Config
from memplan.embed import TERMS, EmbedModel, EmbedTrainConfig, Encoder, embed_all, loss_and_grads, make_batch
from memplan.embed import calibrate_dp
from memplan.env import GridMaze, GridMazeSpec, clover_maze, make_env, open_grid
from memplan.per import PerConfig, Retriever, retrieve
from memplan.pipeline import (
    Models, build_env, build_retriever, collect, load_models, planner_config, refinement_cycle, rng_for,
    run_pipeline, train_embed_model, train_q_model, make_policy, eval_config,
)
from memplan.planners import (
    PlannerConfig, RoadmapPlanner, baseline_q_roadmap, load_roadmap, match_threshold, rprm_build, rrt_build,
    shortest_path,
)
from memplan.qlearn import MLPQ, TabularQ, TDBatch, fit_tabular_exact


@pytest.fixture
def verdict(capsys):
    """Prints the criterion line, then asserts."""
    def report(tag: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """One full pipeline run at the default configuration, shared by several criteria."""
    out = tmp_path_factory.mktemp("run_a")
    cfg = Config()
    t0 = time.perf_counter()
    summary = run_pipeline(cfg, out)
    return cfg, out, summary, time.perf_counter() - t0


def _loaded(cfg, out):
    from memplan import buffer

    env = build_env(cfg)
    log = buffer.load(out / "walk.plog")
    models = load_models(cfg, log, out / "q.bin", out / "embed.bin")
    return env, log, models, load_roadmap(out / "roadmap.json", log)


# 1 -----------------------------------------------------------------------------------
def _small_mazes():
    yield "open 5x5", GridMaze(open_grid(5))
    yield "open 10x10", GridMaze(open_grid(10))
    yield "clover 10", GridMaze(clover_maze(10, 0.05, seed=0))
    yield "clover 11", GridMaze(clover_maze(11, 0.1, seed=1))
    rng = np.random.default_rng(0)
    made = 0
    while made < 3:
        blocked = frozenset((int(x), int(y)) for x, y in rng.integers(0, 9, size=(14, 2)))
        spec = GridMazeSpec(9, 9, blocked)
        m = GridMaze(spec, check_connected=False)
        if m.n_components() == 1:
            made += 1
            yield f"random 9x9 #{made}", GridMaze(spec)


def _covering_walk(m: GridMaze, seed: int):
    steps = 40 * m.n_cells
    while True:
        log = m.random_walk(steps, seed=seed)
        cells = np.array([m.cell_id(p) for p in log.poses[:-1]])
        pairs = set(zip(cells.tolist(), log.actions[:-1].tolist()))
        if len(pairs) == 4 * m.n_cells:
            return log
        steps *= 2


def test_c1_tabular_q_exact(verdict):
    t0 = time.perf_counter()
    gamma, worst, checked = 0.95, 0.0, []
    for name, m in _small_mazes():
        assert m.n_cells <= 100, name
        log = _covering_walk(m, seed=len(name))
        q = TabularQ(4, gamma)
        q.register(log.obs)
        fit_tabular_exact(q, log)
        obs = m.lifting(np.asarray(m.free_cells, dtype=np.float64))
        n = m.n_cells
        s, g = np.repeat(np.arange(n), n), np.tile(np.arange(n), n)
        best = q.values(obs[s], obs[g]).max(axis=1).reshape(n, n)
        bfs = m.distances
        off = ~np.eye(n, dtype=bool) & (bfs - 1 <= q.d_max)
        worst = max(worst, float(np.abs(best - gamma ** (bfs - 1))[off].max()))
        vi = value_iteration(m, gamma)
        worst = max(worst, float(np.abs(best - vi.max(axis=1))[off].max()))
        checked.append(name)
    elapsed = time.perf_counter() - t0
    verdict("C1", worst <= 1e-9 and elapsed < 10,
            f"{len(checked)} mazes <= 100 cells, max |maxQ - gamma^(BFS-1)| = {worst:.2e}, {elapsed:.1f}s")


# 2 -----------------------------------------------------------------------------------
def test_c2_per_matches_brute_force(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for trial in range(200):
        n_total = int(rng.integers(2, 2001))
        dim = int(rng.integers(1, 4))
        log = TrajectoryLog(dim, 3)
        left = n_total
        while left > 0:
            size = int(min(left, rng.integers(1, 400)))
            # integer lattice points make exact-distance ties common
            log.append_episode(rng.integers(-4, 5, size=(size, dim)).astype(float), rng.integers(0, 3, size - 1))
            left -= size
        idx = embed_all(Encoder("identity", dim, dim), log)
        d_p = float(rng.choice([0.0, 1.0, rng.uniform(0.2, 3.0)]))
        l_max = int(rng.integers(0, 40))
        rewards = rng.normal(size=log.n_states).round(1) if trial % 4 == 3 else None
        cfg = PerConfig(d_p, l_max, "custom" if rewards is not None else "neg_length", rewards)
        s_c, s_g = (log.obs[int(rng.integers(log.n_states))] + rng.integers(-1, 2, dim) for _ in range(2))
        seg = retrieve(idx, log, s_c, s_g, cfg)
        got = None if seg is None else (seg.global_start, seg.global_end)
        want = brute_force_pair(log, idx.z, s_c.astype(np.float64), s_g.astype(np.float64), d_p, l_max, rewards)
        mismatches += got != want
    elapsed = time.perf_counter() - t0
    verdict("C2", mismatches == 0 and elapsed < 60,
            f"200 instances (<= 2000 states), {mismatches} mismatches vs enumeration, {elapsed:.1f}s")


# 3 -----------------------------------------------------------------------------------
def _edge_ok(ret, log, u, v, seg, r) -> bool:
    if seg is None or not 0 <= len(seg) <= r:
        return False
    gi = seg.global_indices
    contiguous = bool(np.all(np.diff(gi) == 1)) and bool(np.all(log.episode_of[gi] == log.episode_of[gi[0]]))
    same = np.array_equal(log.obs[gi], seg.obs) and np.array_equal(log.actions[gi[:-1]], seg.actions)
    z = ret.index.z
    near = np.linalg.norm(z[gi[0]] - z[u]) <= ret.cfg.d_p and np.linalg.norm(z[gi[-1]] - z[v]) <= ret.cfg.d_p
    return contiguous and same and bool(near)


def test_c3_edge_soundness(verdict, default_run):
    cfg, out, _, _ = default_run
    env, log, models, rm = _loaded(cfg, out)
    ret = models.retriever
    graphs = {"R-PRM (trained encoder)": [(rm.vertices[a], rm.vertices[b], e.segment, rm.r)
                                         for (a, b), e in rm.edges.items()]}
    pc = PlannerConfig(r=cfg["planner.r"], iterations=300)
    for star in (False, True):
        tree = rrt_build(ret, pc, 0, np.random.default_rng(3), star=star)
        graphs["R-RRT*" if star else "R-RRT"] = [(tree.nodes[tree.parent[k]], tree.nodes[k], tree.segments[k], pc.r)
                                                for k in range(1, len(tree))]
    grid = make_env("open", 12, obs_mode="identity")
    glog = grid.random_walk(8000, seed=0)
    enc = Encoder("identity", 2, 2)
    gret = Retriever(embed_all(enc, glog, calibrate_dp(enc, glog, 0.5)), glog, PerConfig(0.5, 20))
    grm = rprm_build(gret, PlannerConfig(r=6, num_vertices=120), np.random.default_rng(4))
    graphs["R-PRM (identity grid)"] = [(grm.vertices[a], grm.vertices[b], e.segment, grm.r)
                                      for (a, b), e in grm.edges.items()]
    bad, total = 0, 0
    for name, edges in graphs.items():
        use = gret if "identity" in name else ret
        use_log = glog if "identity" in name else log
        bad += sum(not _edge_ok(use, use_log, u, v, seg, r) for u, v, seg, r in edges)
        total += len(edges)
    sizes = ", ".join(f"{k}: {len(v)}" for k, v in graphs.items())
    verdict("C3", bad == 0 and all(graphs.values()), f"{bad} unsound of {total} edges ({sizes})")


# 4 -----------------------------------------------------------------------------------
def test_c4_dijkstra_equals_bellman_ford(verdict):
    rng = np.random.default_rng(4)
    wrong = 0
    for _ in range(200):
        n = int(rng.integers(1, 51))
        edges = [(u, v, float(rng.integers(0, 10))) for u in range(n) for v in range(n)
                 if u != v and rng.random() < 0.1]
        adj = {k: [] for k in range(n)}
        for u, v, w in edges:
            adj[u].append((v, w))
        src = int(rng.integers(n))
        ref = bellman_ford(n, edges, src)
        for dst in range(n):
            got = shortest_path(adj, src, dst)
            wrong += (math.inf if got is None else got[1]) != ref[dst]
    verdict("C4", wrong == 0, f"200 graphs (<= 50 vertices), {wrong} disagreeing distances")


# 5 -----------------------------------------------------------------------------------
def test_c5_plan_near_optimal(verdict):
    t0 = time.perf_counter()
    m = make_env("open", 20, obs_mode="identity")
    log = m.random_walk(50_000, seed=0)
    covered = len({tuple(p) for p in log.poses.astype(int).tolist()})
    enc = Encoder("identity", 2, 2)
    d_p = calibrate_dp(enc, log, 0.5)
    ret = Retriever(embed_all(enc, log, d_p), log, PerConfig(d_p, 20))
    planner = RoadmapPlanner(rprm_build(ret, PlannerConfig(r=10, num_vertices=300), np.random.default_rng(5)), ret)
    rng = np.random.default_rng(55)
    ratios = []
    while len(ratios) < 50:
        a, b = (int(x) for x in rng.integers(m.n_cells, size=2))
        if m.distances[a, b] < 10:
            continue
        plan = planner.query_obs(np.array(m.free_cells[a], np.float32), np.array(m.free_cells[b], np.float32))
        ratios.append(math.inf if plan is None else plan.total_len / m.distances[a, b])
    med = float(np.median(ratios))
    elapsed = time.perf_counter() - t0
    verdict("C5", covered == m.n_cells and med <= 1.5 and elapsed < 300,
            f"median plan/BFS ratio {med:.3f} (max {max(ratios):.3f}) over 50 pairs, "
            f"coverage {covered}/{m.n_cells}, {elapsed:.1f}s")


# 6 -----------------------------------------------------------------------------------
def test_c6_fewer_false_edges_than_q_threshold(verdict):
    t0 = time.perf_counter()
    rows = []
    for seed in range(5):
        cfg = Config({"seed": seed, "q.backend": "mlp", "q.steps": 5000, "q.lr": 1e-3, "q.optimizer": "adam"})
        env = build_env(cfg)
        log = collect(cfg, env)
        q, _ = train_q_model(cfg, log, env)
        model, _, c_q = train_embed_model(cfg, log, q)
        ret = build_retriever(cfg, model, log)
        rm = rprm_build(ret, planner_config(cfg), rng_for(cfg, "roadmap"))
        thr = match_threshold(q, log, rm.vertices, len(rm.edges))
        base = baseline_q_roadmap(ret, q, thr, planner_config(cfg), None, vertices=rm.vertices)
        f_r = ev.false_edge_count(rm, env, log)[0]
        f_b = ev.false_edge_count(base, env, log)[0]
        matched = abs(base.mean_degree - rm.mean_degree) <= 0.1 * rm.mean_degree
        rows.append((seed, f_r, f_b, rm.mean_degree, base.mean_degree, matched))
    elapsed = time.perf_counter() - t0
    ok = all(m and f_r < f_b for _, f_r, f_b, _, _, m in rows) and elapsed < 600
    detail = "; ".join(f"seed {s}: {f_r} vs {f_b} (deg {d_r:.1f}/{d_b:.1f})" for s, f_r, f_b, d_r, d_b, _ in rows)
    verdict("C6", ok, f"false edges R-PRM vs Q-threshold: {detail}; {elapsed:.1f}s")


# 7 -----------------------------------------------------------------------------------
def test_c7_embedding_calibration(verdict, default_run):
    cfg, out, _, _ = default_run
    t0 = time.perf_counter()
    env, log, models, _ = _loaded(cfg, out)
    cal = ev.distance_calibration(env, models.embed.encoder, models.q, None, None, np.random.default_rng(7), 200, 10)
    rho = ev.spearman_within(cal["raw"], "d_phi", 10)
    means = {r["bfs"]: r["d_phi_mean"] for r in cal["rows"]}
    rising = means[1] < means[2] < means[3]
    elapsed = time.perf_counter() - t0
    verdict("C7", rho >= 0.8 and rising and elapsed < 600,
            f"Spearman {rho:.3f} on BFS <= 10; mean d_phi bins 1-3: "
            f"{means[1]:.3f}, {means[2]:.3f}, {means[3]:.3f}; {elapsed:.1f}s (+ shared training)")


# 8 -----------------------------------------------------------------------------------
def test_c8_success_ordering(verdict, default_run):
    _, _, summary, elapsed = default_run
    curves = {k: {b["n"]: b for b in v["bands"]} for k, v in summary["success"].items()}
    ok = elapsed < 900
    parts = []
    for n in (4, 8, 12):
        rm, per, gq = (curves[p][n] for p in ("roadmap-mpc", "per-mpc", "greedy-q"))
        ok &= ev.not_worse(rm["successes"], rm["trials"], per["successes"], per["trials"])
        ok &= ev.not_worse(per["successes"], per["trials"], gq["successes"], gq["trials"])
        ok &= rm["trials"] == 200
        parts.append(f"n={n}: {rm['rate']:.3f} >= {per['rate']:.3f} >= {gq['rate']:.3f}")
    verdict("C8", bool(ok), f"roadmap-MPC >= PER-MPC >= greedy-Q; {'; '.join(parts)}; {elapsed:.1f}s full run")


# 9 -----------------------------------------------------------------------------------
def test_c9_refinement_trend(verdict, default_run):
    cfg, out, _, _ = default_run
    t0 = time.perf_counter()
    env, log, models, rm = _loaded(cfg, out)
    ecfg = eval_config(cfg)
    pairs = ev.eval_pairs(env, ecfg)
    before = ev.eval_success_curve(env, make_policy("greedy-q", models), ecfg, pairs)["bands"]
    err0 = ev.step_distance_error(env, models.q, np.random.default_rng(9), 15)
    _, new, reports = refinement_cycle(cfg, env, models, rm)
    after = ev.eval_success_curve(env, make_policy("greedy-q", new), ecfg, pairs)["bands"]
    err1 = ev.step_distance_error(env, new.q, np.random.default_rng(9), 15)
    elapsed = time.perf_counter() - t0
    far = sorted(range(len(before)), key=lambda k: before[k]["n"])[-2:]
    improved = all(after[k]["rate"] > before[k]["rate"] for k in far)
    rates = ", ".join(f"n={b['n']}: {b['rate']:.3f} -> {a['rate']:.3f}" for b, a in zip(before, after))
    verdict("C9", improved and err1 < err0 and elapsed < 1200,
            f"greedy-Q {rates}; step-distance error {err0:.2f} -> {err1:.2f}; "
            f"{len(reports)} collection rounds; {elapsed:.1f}s")


# 10 ----------------------------------------------------------------------------------
def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale < 1e-8 else abs(a - b) / scale


def test_c10_gradient_checks(verdict):
    rng = np.random.default_rng(10)
    env = make_env("clover", 12, obs_mode="random", obs_dim=16)
    log = env.random_walk(3000, seed=0)
    q = TabularQ(4, 0.95)
    q.register(log.obs)
    fit_tabular_exact(q, log)
    h, worst, checks = 1e-5, 0.0, 0
    for term in TERMS:
        cfg = EmbedTrainConfig(latent_dim=8, hidden=32, head_hidden=16, c_q=2.0, d_p=1.0)
        model = EmbedModel.create(log.obs_dim, 4, cfg, seed=TERMS.index(term))
        for _ in range(10):
            b = make_batch(q, log, rng, 64, cfg.t_max)
            fixed = model.encoder(b.s_next)
            _, _, grads = loss_and_grads(model, b, {term: 1.0})
            params = model.params
            for _ in range(10):
                k = int(rng.integers(len(params)))
                idx = tuple(int(rng.integers(s)) for s in params[k].shape)
                old = params[k][idx]
                params[k][idx] = old + h
                up = loss_and_grads(model, b, {term: 1.0}, fwd_target=fixed)[0]
                params[k][idx] = old - h
                down = loss_and_grads(model, b, {term: 1.0}, fwd_target=fixed)[0]
                params[k][idx] = old
                worst = max(worst, _rel_err(float(grads[k][idx]), (up - down) / (2 * h)))
                checks += 1
    net = MLPQ(log.obs_dim, 4, 0.95, hidden=(32, 32), seed=0)
    obs = log.obs.astype(np.float64)
    for _ in range(10):
        t = rng.integers(0, log.n_states - 1, 64)
        g = rng.integers(0, log.n_states, 64)
        batch = TDBatch(obs[t], log.actions[t].astype(np.int64), obs[t + 1], obs[g])
        y = net._targets(batch)
        _, grads = net.td_loss_and_grads(batch, y)
        params = net.net.params
        for _ in range(10):
            k = int(rng.integers(len(params)))
            idx = tuple(int(rng.integers(s)) for s in params[k].shape)
            old = params[k][idx]
            params[k][idx] = old + h
            up = net.td_loss_and_grads(batch, y)[0]
            params[k][idx] = old - h
            down = net.td_loss_and_grads(batch, y)[0]
            params[k][idx] = old
            worst = max(worst, _rel_err(float(grads[k][idx]), (up - down) / (2 * h)))
            checks += 1
    verdict("C10", worst <= 1e-4 and checks == 500,
            f"{checks} coordinate checks (4 encoder terms + TD loss, 10 batches x 10 coordinates), "
            f"max relative error {worst:.2e}")


# 11 ----------------------------------------------------------------------------------
def test_c11_determinism(verdict, default_run, tmp_path):
    cfg, out_a, _, _ = default_run
    out_b = tmp_path / "run_b"
    run_pipeline(cfg, out_b)
    names = sorted(p.name for p in Path(out_a).iterdir())
    diff = [n for n in names if not (out_b / n).exists() or (out_a / n).read_bytes() != (out_b / n).read_bytes()]
    diff += sorted({p.name for p in out_b.iterdir()} - set(names))
    key = {"walk.plog", "q.bin", "embed.bin", "report.json"}
    verdict("C11", not diff and key <= set(names),
            f"{len(names)} artifacts compared byte for byte, {len(diff)} differ {diff if diff else ''}".strip())
