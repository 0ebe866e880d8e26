"""Command line entry point. Every subcommand prints one JSON summary on stdout.

Failures exit with status 2 and a JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import buffer
from .config import load_config


def _pose(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memplan", description="Retrieval-based planning over a replay buffer.")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_, *needs):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="TOML configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
        s.add_argument("--out", default="out", help="output directory (default: out)")
        s.add_argument("-v", "--verbose", action="store_true")
        for n in needs:
            s.add_argument(f"--{n}", required=True, help=f"path to the {n} file")
        return s

    cmd("collect", "random-walk the environment into a buffer file")
    cmd("buffer-info", "summarize a buffer file", "log")
    cmd("train-q", "train the goal-conditioned Q-function", "log")
    cmd("train-embed", "train the encoder against a trained Q-function", "log", "q")
    cmd("build-roadmap", "sample vertices and retrieve roadmap edges", "log", "embed")
    s = cmd("plan", "stitch a plan between two cells", "log", "embed", "roadmap")
    s.add_argument("--start", type=_pose, required=True, help="start cell, e.g. 0,0")
    s.add_argument("--goal", type=_pose, required=True, help="goal cell")
    s = cmd("per-probe", "trace one retrieval between two cells", "log", "embed")
    s.add_argument("--start", type=_pose, required=True)
    s.add_argument("--goal", type=_pose, required=True)
    s = cmd("eval", "success curves per distance band", "log", "q", "embed", "roadmap")
    s.add_argument("--policy", action="append", choices=["roadmap-mpc", "per-mpc", "greedy-q", "random"],
                   help="policy to evaluate (repeatable; default: the three planners)")
    cmd("refine", "one refinement cycle: collect rollouts and retrain", "log", "q", "embed", "roadmap")
    cmd("report", "distance calibration and false-edge counts", "log", "q", "embed", "roadmap")
    cmd("run", "the whole pipeline from collection to report")
    return p


def _models(cfg, log, args):
    from .embed import EmbedModel
    from .pipeline import Models, build_retriever
    from .qlearn import load_q

    q = load_q(args.q) if getattr(args, "q", None) else None
    model = EmbedModel.load(args.embed)
    return Models(q, model, build_retriever(cfg, model, log), model.cfg.c_q, [], [])


def _observe(env, pose):
    state = env.state_from_pose(pose)
    env.cell_id(state.pose)  # rejects walls and out-of-range cells
    return env.observe(state)


def run(args) -> dict:
    from . import pipeline as pl

    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"command": args.command, "config_hash": cfg.hash()}

    if args.command == "run":
        report = pl.run_pipeline(cfg, out)
        summary.update(out=str(out), success={k: [b["rate"] for b in v["bands"]] for k, v in report["success"].items()},
                       false_edges=report["roadmap"]["false_edges"])
        return summary
    env = pl.build_env(cfg)
    if args.command == "collect":
        log = pl.collect(cfg, env)
        buffer.save(log, out / "walk.plog")
        return {**summary, "log": str(out / "walk.plog"), **buffer.info(log)}

    log = buffer.load(args.log)
    if args.command == "buffer-info":
        return {**summary, **buffer.info(log)}
    if args.command == "train-q":
        q, curve = pl.train_q_model(cfg, log, env)
        q.save(out / "q.bin")
        pl.write_csv(out / "q_loss.csv", ["step", "td_loss"], curve)
        return {**summary, "q": str(out / "q.bin"), "final_loss": curve[-1][1] if curve else None}
    if args.command == "train-embed":
        from .qlearn import load_q

        model, curve, c_q = pl.train_embed_model(cfg, log, load_q(args.q))
        model.save(out / "embed.bin")
        pl.write_csv(out / "embed_loss.csv", ["step", "total", "l_q", "l_time", "l_inv", "l_fwd"], curve)
        return {**summary, "embed": str(out / "embed.bin"), "c_q": c_q, "final_loss": curve[-1][1] if curve else None}

    from .planners import RoadmapPlanner, load_roadmap, save_roadmap

    models = _models(cfg, log, args)
    if args.command == "per-probe":
        return {**summary, **models.retriever.probe(_observe(env, args.start), _observe(env, args.goal))}
    if args.command == "build-roadmap":
        from . import figures

        rm = pl.build_roadmap(cfg, models)
        save_roadmap(rm, out / "roadmap.json", log)
        figures.roadmap_figure(env, log, rm, out / "roadmap.svg")
        return {**summary, "roadmap": str(out / "roadmap.json"), "vertices": rm.n_vertices,
                "edges": len(rm.edges), "mean_degree": rm.mean_degree}

    rm = load_roadmap(args.roadmap, log)
    if args.command == "plan":
        from . import figures

        plan = RoadmapPlanner(rm, models.retriever).query_obs(_observe(env, args.start), _observe(env, args.goal))
        payload = {"found": plan is not None}
        if plan is not None:
            payload.update(path=plan.path, segments=[list(s.key()) for s in plan.segments],
                           total_len=plan.total_len, actions=plan.actions().tolist(),
                           poses=log.poses[plan.states()].tolist())
        pl.write_json(out / "plan.json", payload)
        figures.roadmap_figure(env, log, rm, out / "plan.svg", plan)
        return {**summary, "plan": str(out / "plan.json"), "found": payload["found"],
                "total_len": payload.get("total_len")}
    if args.command == "eval":
        from . import evaluation as ev
        from . import figures

        ecfg = pl.eval_config(cfg)
        pairs = ev.eval_pairs(env, ecfg)
        names = args.policy or ["roadmap-mpc", "per-mpc", "greedy-q"]
        curves = {n: ev.eval_success_curve(env, pl.make_policy(n, models, rm), ecfg, pairs) for n in names}
        pl.write_json(out / "success.json", curves)
        figures.success_figure(curves, out / "success.svg")
        return {**summary, "success": {k: [b["rate"] for b in v["bands"]] for k, v in curves.items()}}
    if args.command == "refine":
        from .refine import InsufficientDataError  # noqa: F401  (surfaced through the error handler)

        data, new, reports = pl.refinement_cycle(cfg, env, models, rm)
        buffer.save(data, out / "refined.plog")
        new.q.save(out / "q_refined.bin")
        new.embed.save(out / "embed_refined.bin")
        keys = list(reports[0].keys()) if reports else []
        pl.write_csv(out / "refine_rounds.csv", ["round", *keys], [[k, *r.values()] for k, r in enumerate(reports)])
        return {**summary, "rounds": len(reports), "refined_log": str(out / "refined.plog"),
                "steps": data.total_steps}
    if args.command == "report":
        from . import evaluation as ev
        from . import figures

        calib = ev.distance_calibration(env, models.embed.encoder, models.q, models.retriever, models.embed,
                                        pl.rng_for(cfg, "report"), cfg["report.pairs_per_bin"],
                                        cfg["report.max_bfs"])
        false, edges = ev.false_edge_count(rm, env, log, cfg["report.false_edge_slack"])
        pl.write_calibration_csv(out / "calibration.csv", calib["rows"])
        figures.calibration_figure(calib["raw"], out / "calibration.svg")
        err = ev.step_distance_error(env, models.q, pl.rng_for(cfg, "report"), cfg["report.max_bfs"])
        payload = {"false_edges": false, "edges": edges, "step_distance_error": err,
                   "spearman_d_phi": ev.spearman_within(calib["raw"]), "calibration": calib["rows"]}
        pl.write_json(out / "report.json", payload)
        return {**summary, **{k: payload[k] for k in ("false_edges", "edges", "step_distance_error",
                                                       "spearman_d_phi")}}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = run(args)
    except Exception as exc:  # every failure becomes a structured message
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(_clean(summary), sort_keys=True))
    return 0


def _clean(obj):
    from .pipeline import _jsonable

    return _jsonable(obj)


if __name__ == "__main__":
    sys.exit(main())
