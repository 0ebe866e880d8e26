"""Glue between configuration and the library: build, train, plan, evaluate, write artifacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import buffer
from .buffer import TrajectoryLog
from .config import Config
from .embed import EmbedModel, EmbedTrainConfig, calibrate_dp, embed_all, train_encoder
from .env import make_env, obs_equality_tolerance
from .evaluation import EvalConfig
from .per import PerConfig, Retriever
from .planners import PlannerConfig, Roadmap, RoadmapPlanner, rprm_build
from .policy import GreedyQ, PerMPC, RandomPolicy, RoadmapMPC
from .qlearn import QTrainConfig, calibrate_cq, fit_tabular_exact, make_q, train_q

log_ = logging.getLogger(__name__)

# independent RNG streams per stage, all derived from the one configured seed
STREAM = {"q": 1, "embed": 2, "roadmap": 3, "eval": 4, "refine": 5, "report": 6}


def rng_for(cfg: Config, stage: str) -> np.random.Generator:
    return np.random.default_rng([cfg["seed"], STREAM[stage]])


def build_env(cfg: Config):
    return make_env(cfg["env.kind"], cfg["grid.width"], cfg["grid.height"], cfg["grid.obstacle_density"],
                    cfg["obs.mode"], cfg["obs.dim"], cfg["obs.scale"], cfg["seed"])


def collect(cfg: Config, env=None) -> TrajectoryLog:
    env = env or build_env(cfg)
    return env.random_walk(cfg["collect.steps"], seed=cfg["seed"])


def q_train_config(cfg: Config) -> QTrainConfig:
    return QTrainConfig(cfg["q.steps"], cfg["q.batch"], cfg["q.lr"], cfg["q.target_sync_every"], cfg["q.gamma"],
                        cfg["q.geom_p"], cfg["q.optimizer"])


def train_q_model(cfg: Config, log: TrajectoryLog, env=None):
    """Returns ``(q, curve)``; ``curve`` is empty for exact tabular sweeps."""
    eq_tol = cfg["q.eq_tol"]
    if eq_tol < 0:
        eq_tol = obs_equality_tolerance(env) if env is not None and hasattr(env, "free_cells") else 0.0
    qc = q_train_config(cfg)
    q = make_q(cfg["q.backend"], log.obs_dim, log.n_actions, qc.gamma, seed=cfg["seed"], lr=qc.lr,
               optimizer=qc.optimizer, eq_tol=eq_tol, hidden=(cfg["q.hidden"],) * 2)
    if cfg["q.exact"] and cfg["q.backend"] == "tabular":
        fit_tabular_exact(q, log)
        return q, []
    return q, train_q(q, log, qc, rng_for(cfg, "q"))


def embed_train_config(cfg: Config, c_q: float) -> EmbedTrainConfig:
    return EmbedTrainConfig(cfg["embed.latent_dim"], cfg["embed.d_p"], c_q, cfg["embed.w_q"], cfg["embed.w_time"],
                            cfg["embed.w_inv"], cfg["embed.w_fwd"], cfg["embed.steps"], cfg["embed.batch"],
                            cfg["embed.lr"], cfg["embed.t_max"], cfg["embed.arch"], cfg["embed.hidden"],
                            cfg["embed.hidden"], cfg["embed.margin"])


def train_embed_model(cfg: Config, log: TrajectoryLog, q):
    """Returns ``(model, curve, c_q)``; a non-positive ``embed.c_q`` means calibrate it from Q."""
    c_q = cfg["embed.c_q"]
    if c_q <= 0:
        c_q = calibrate_cq(q, log, cfg["q.cq_fraction"], rng=rng_for(cfg, "embed"))
    ec = embed_train_config(cfg, c_q)
    model, curve = train_encoder(log, q, ec, rng_for(cfg, "embed"), seed=cfg["seed"])
    return model, curve, c_q


def build_retriever(cfg: Config, model: EmbedModel, log: TrajectoryLog) -> Retriever:
    d_p = calibrate_dp(model.encoder, log, cfg["per.dp_fraction"])
    return Retriever(embed_all(model.encoder, log, d_p), log, PerConfig(d_p, cfg["per.l_max"]))


def planner_config(cfg: Config) -> PlannerConfig:
    return PlannerConfig(cfg["planner.r"], cfg["planner.num_vertices"], cfg["planner.sampling"],
                         cfg["planner.iterations"])


def eval_config(cfg: Config, bands=None) -> EvalConfig:
    return EvalConfig(list(bands if bands is not None else cfg["eval.bands"]), cfg["eval.pairs_per_band"],
                      cfg["eval.success_radius"], cfg["eval.budget_multiplier"], cfg["eval.mode"], cfg["seed"])


@dataclass
class Models:
    q: object
    embed: EmbedModel
    retriever: Retriever
    c_q: float
    q_curve: list
    embed_curve: list

    @property
    def log(self) -> TrajectoryLog:
        return self.retriever.log


def train_all(cfg: Config, log: TrajectoryLog, env=None) -> Models:
    q, q_curve = train_q_model(cfg, log, env)
    model, e_curve, c_q = train_embed_model(cfg, log, q)
    return Models(q, model, build_retriever(cfg, model, log), c_q, q_curve, e_curve)


def build_roadmap(cfg: Config, models: Models) -> Roadmap:
    return rprm_build(models.retriever, planner_config(cfg), rng_for(cfg, "roadmap"))


def make_policy(name: str, models: Models, roadmap: Roadmap | None = None, replan_every: int = 1):
    if name == "greedy-q":
        return GreedyQ(models.q)
    if name == "per-mpc":
        return PerMPC(models.q, models.retriever)
    if name == "roadmap-mpc":
        if roadmap is None:
            raise ValueError("roadmap-mpc needs a roadmap")
        return RoadmapMPC(models.q, RoadmapPlanner(roadmap, models.retriever), replan_every)
    if name == "random":
        return RandomPolicy(models.log.n_actions)
    raise ValueError(f"unknown policy {name!r}")


# -- artifact writers ----------------------------------------------------------------
def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_models(models: Models, outdir: Path) -> dict[str, str]:
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"q": outdir / "q.bin", "embed": outdir / "embed.bin"}
    models.q.save(paths["q"])
    models.embed.save(paths["embed"])
    write_csv(outdir / "q_loss.csv", ["step", "td_loss"], models.q_curve)
    write_csv(outdir / "embed_loss.csv", ["step", "total", "l_q", "l_time", "l_inv", "l_fwd"], models.embed_curve)
    return {k: str(v) for k, v in paths.items()}


def load_models(cfg: Config, log: TrajectoryLog, q_path, embed_path) -> Models:
    from .qlearn import load_q

    q = load_q(q_path)
    model = EmbedModel.load(embed_path)
    return Models(q, model, build_retriever(cfg, model, log), model.cfg.c_q, [], [])


def run_pipeline(cfg: Config, outdir, eval_bands=None, figures: bool = True) -> dict:
    """Collect, train, build a roadmap, evaluate and report; every artifact lands in ``outdir``."""
    from . import evaluation as ev

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    env = build_env(cfg)
    log = collect(cfg, env)
    buffer.save(log, outdir / "walk.plog")
    models = train_all(cfg, log, env)
    save_models(models, outdir)
    roadmap = build_roadmap(cfg, models)
    from .planners import save_roadmap
    save_roadmap(roadmap, outdir / "roadmap.json", log)
    ecfg = eval_config(cfg, eval_bands)
    pairs = ev.eval_pairs(env, ecfg)
    curves = {name: ev.eval_success_curve(env, make_policy(name, models, roadmap), ecfg, pairs)
              for name in ("roadmap-mpc", "per-mpc", "greedy-q")}
    calib = ev.distance_calibration(env, models.embed.encoder, models.q, models.retriever, models.embed,
                                    rng_for(cfg, "report"), cfg["report.pairs_per_bin"], cfg["report.max_bfs"])
    false_rprm = ev.false_edge_count(roadmap, env, log, cfg["report.false_edge_slack"])
    summary = {"config_hash": cfg.hash(), "seed": cfg["seed"], "config": cfg.to_dict(),
               "buffer": buffer.info(log), "c_q": models.c_q, "d_p": models.retriever.cfg.d_p,
               "roadmap": {"vertices": roadmap.n_vertices, "edges": len(roadmap.edges),
                           "false_edges": false_rprm[0]},
               "success": curves, "calibration": calib["rows"]}
    write_json(outdir / "report.json", summary)
    write_calibration_csv(outdir / "calibration.csv", calib["rows"])
    if figures:
        from . import figures as fig
        fig.roadmap_figure(env, log, roadmap, outdir / "roadmap.svg")
        fig.calibration_figure(calib["raw"], outdir / "calibration.svg")
        fig.success_figure(curves, outdir / "success.svg")
    return summary


def write_calibration_csv(path, rows: list[dict]) -> None:
    if not rows:
        write_csv(path, ["bfs"], [])
        return
    header = list(rows[0].keys())
    write_csv(path, header, [[r[h] for h in header] for r in rows])


def refine_config(cfg: Config) -> "RefineConfig":
    from .refine import RefineConfig

    return RefineConfig(cfg["refine.rounds"], cfg["refine.goals_per_round"], list(cfg["refine.bands"]),
                        cfg["eval.budget_multiplier"], cfg["eval.success_radius"], cfg["eval.mode"],
                        cfg["refine.keep_only_successes"], cfg["refine.match_size"])


def refinement_cycle(cfg: Config, env, models: Models, roadmap: Roadmap):
    """One cycle: collect roadmap-policy rollouts, then retrain everything on them.

    Returns ``(refined data, new models, round reports)``.
    """
    from .refine import collect_refined, retrain_all

    rc = refine_config(cfg)
    data, reports = collect_refined(env, make_policy("roadmap-mpc", models, roadmap), models.log, rc,
                                    rng_for(cfg, "refine"))
    new = retrain_all(cfg, data, env, models.log.total_steps if rc.match_size else 0)
    return data, new, reports
