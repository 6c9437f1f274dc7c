"""Command-line entry point: ``adprog <command> [options]``.

All randomness comes from ``--seed`` (falling back to the config's ``seed``).
Outputs are written to a temporary name and moved into place at the end, so
a non-zero exit never leaves a half-written file behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cohort import (DEFAULT_COGNITION_SCHEDULE, DEFAULT_IMAGING_SCHEDULE, CohortConfig,
                     apply_missing_mask, export_tabular, generate_cohort, ingest_tabular)
from .estimation import ParamTable, fit_param_table
from .experiments import (PipelineConfig, run_cv, trajectory_header, trajectory_rows,
                          write_report, greedy_predictions)
from .model import build_graph, default_graph
from .plotting import plot_trajectories
from .rl.train import PolicyCheckpoint, initializers_from_cohort, predict, train

log = logging.getLogger("adprog")


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _seed(args, cfg: dict) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _pipeline(args, cfg: dict) -> PipelineConfig:
    pc = PipelineConfig.from_dict(cfg.get("pipeline", {}), args.preset)
    return replace(pc, seed=_seed(args, cfg))


@contextlib.contextmanager
def _atomic_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".part")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


@contextlib.contextmanager
def _atomic_dir(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=path.name, suffix=".part"))
    try:
        yield tmp
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def _read_cohort(path, args):
    recs = ingest_tabular(path, cognition_raw_mmse=getattr(args, "raw_mmse", False))
    if recs.rejected:
        log.warning("%d subjects rejected on ingest", len(recs.rejected))
    if not recs:
        raise SystemExit(f"no usable subjects in {path}")
    return list(recs)


def _graph(cfg: dict):
    g = cfg.get("graph")
    if not g:
        return default_graph()
    return build_graph(g["regions"], g["adjacency"])


def _estimation_opts(cfg: dict) -> dict:
    e = cfg.get("estimation", {})
    return {"keys": tuple(e.get("group_keys", ("feature_a", "feature_b"))),
            "activity_exponent": int(e.get("activity_exponent", 1)),
            "amyloid": e.get("amyloid", "auto")}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> None:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    cc = CohortConfig.from_dict({**cfg.get("cohort", {}), "seed": seed})
    cohort = generate_cohort(cc, _graph(cfg))
    mask = cfg.get("mask", {})
    if args.mask or mask.get("enabled", False):
        img = {int(k): v for k, v in mask.get("imaging", DEFAULT_IMAGING_SCHEDULE).items()}
        cog = {int(k): v for k, v in mask.get("cognition", DEFAULT_COGNITION_SCHEDULE).items()}
        cohort = apply_missing_mask(cohort, img, seed, cog)
    out = Path(args.out)
    demo = out.with_name(out.stem + "_demographics.csv")
    with _atomic_file(out) as tmp, _atomic_file(demo) as tmp_demo:
        export_tabular(cohort, tmp, tmp_demo)
    print(f"wrote {len(cohort)} subjects to {out}")


def cmd_estimate(args) -> None:
    cfg = load_config(args.config)
    cohort = _read_cohort(args.cohort, args)
    opts = _estimation_opts(cfg)
    if args.individual:
        opts["keys"] = ("id",)
    elif args.group_by is not None:
        opts["keys"] = tuple(args.group_by)
    table = fit_param_table(cohort, opts["keys"], _graph(cfg), opts["activity_exponent"],
                            opts["amyloid"])
    with _atomic_file(args.out) as tmp:
        table.save(tmp)
    print(f"wrote {len(table.entries)} parameter groups to {args.out}")


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    pc = _pipeline(args, cfg)
    tcfg = replace(pc.train, seed=pc.seed)
    if args.lambda_ is not None:
        tcfg = replace(tcfg, lambda_=args.lambda_)
    if args.I0 is not None:
        tcfg = replace(tcfg, population_I0=args.I0)
    if args.reward is not None:
        tcfg = replace(tcfg, reward=args.reward)
    if args.episodes is not None:
        tcfg = replace(tcfg, episodes_total=args.episodes)
    cohort = _read_cohort(args.cohort, args)
    table = ParamTable.load(args.table)
    graph = _graph(cfg)
    inits = initializers_from_cohort(cohort, table, tcfg.lambda_, graph, pc.amyloid)

    def echo(row):
        print(f"epoch {row['epoch']:4d}  mean reward {row['mean_reward']:.4f}  "
              f"kl {row['mean_kl']:.5f}", flush=True)

    ck = train(tcfg, inits, pc.sim, graph, callback=echo)
    with _atomic_file(args.out) as tmp:
        ck.save(tmp)
    if args.curve:
        with _atomic_file(args.curve) as tmp:
            ck.write_curve(tmp)
    print(f"wrote checkpoint {args.out}")


def cmd_predict(args) -> None:
    cfg = load_config(args.config)
    cohort = _read_cohort(args.cohort, args)
    table = ParamTable.load(args.table)
    ck = PolicyCheckpoint.load(args.checkpoint) if args.checkpoint else None
    if ck is None and args.method == "rl":
        raise SystemExit("--checkpoint is required for the rl method")
    lam = args.lambda_ if args.lambda_ is not None else (ck.config.lambda_ if ck else 2.0)
    I0 = args.I0 or (ck.config.population_I0 if ck else (9.0, 1.0))
    sim = ck.sim if ck else _pipeline(args, cfg).sim
    graph = _graph(cfg)
    inits = initializers_from_cohort(cohort, table, lam, graph)
    by_id = {r.id: r for r in cohort}
    recs = [by_id[i.subject_id] for i in inits]
    if args.method == "rl":
        traj = predict(ck.policy, inits, sim, I0, graph)
    else:
        traj = greedy_predictions(inits, I0, sim, graph)
    with _atomic_file(args.out) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(trajectory_header(traj.X.shape[2]))
            w.writerows(trajectory_rows(args.method, "", traj, recs, sim.horizon))
    print(f"wrote {len(recs)} predicted trajectories to {args.out}")


def cmd_evaluate(args) -> None:
    cfg = load_config(args.config)
    pc = _pipeline(args, cfg)
    if args.methods:
        pc = replace(pc, methods=tuple(args.methods))
    if args.episodes is not None:
        pc = replace(pc, train=replace(pc.train, episodes_total=args.episodes))
    cohort = _read_cohort(args.cohort, args)
    res = run_cv(cohort, pc, _graph(cfg), jobs=args.jobs)
    with _atomic_dir(args.out) as tmp:
        write_report(res, tmp, cohort[0].n_regions)
    for m, rep in res.reports.items():
        print(f"{m:12s} MAE {rep.pooled['mae']:.4f}  MSE {rep.pooled['mse']:.4f}")
    print(f"selected lambda={res.grid.lambda_} I0={list(res.grid.population_I0)}")


def cmd_plot(args) -> None:
    with _atomic_dir(args.out) as tmp:
        files = plot_trajectories(args.trajectories, tmp)
    for f in files:
        print(Path(args.out) / f.name)


# ---------------------------------------------------------------------------


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see configs/default.json)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adprog", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthetic cohort to CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--mask", action="store_true", help="apply the missing-visit schedule")
    g.set_defaults(func=cmd_generate)

    def cohort_arg(sp):
        sp.add_argument("--cohort", required=True, help="long-format cohort CSV")
        sp.add_argument("--raw-mmse", action="store_true",
                        help="cognition column holds raw MMSE (0-30)")

    e = sub.add_parser("estimate", parents=[common], help="fit the parameter table")
    cohort_arg(e)
    e.add_argument("--group-by", nargs="*", default=None,
                   help="demographic keys (extra fields by name); none = pooled")
    e.add_argument("--individual", action="store_true", help="one entry per subject")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    cohort_arg(t)
    t.add_argument("--table", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--curve", help="also write the training curve CSV")
    t.add_argument("--lambda", dest="lambda_", type=float, default=None)
    t.add_argument("--I0", type=_floats, default=None, help="population I(0), e.g. 9,1")
    t.add_argument("--reward", choices=("full", "mismatch", "cost"), default=None)
    t.add_argument("--episodes", type=int, default=None)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="baseline-only 10-year prediction")
    cohort_arg(pr)
    pr.add_argument("--table", required=True)
    pr.add_argument("--checkpoint")
    pr.add_argument("--method", choices=("rl", "without_rl"), default="rl")
    pr.add_argument("--lambda", dest="lambda_", type=float, default=None)
    pr.add_argument("--I0", type=_floats, default=None)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", parents=[common], help="cross-validated comparison")
    cohort_arg(ev)
    ev.add_argument("--methods", nargs="+", choices=("rl", "without_rl"), default=None)
    ev.add_argument("--episodes", type=int, default=None, help="override the episode budget")
    ev.add_argument("--out", required=True, help="report directory")
    ev.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", parents=[common], help="SVG charts from trajectories.csv")
    pl.add_argument("--trajectories", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
