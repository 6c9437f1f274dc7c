"""Cross-validated evaluation: fold plans, the (lambda, I0) grid search,
trajectory metrics and the recovery / consistency analyses."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import rollout_without_rl
from .cohort import SubjectRecord
from .estimation import ParamTable, fit_param_table
from .model import BatchTrajectory, BrainGraph, SimConfig, default_graph
from .rl.policy import GaussianMLPPolicy
from .rl.train import (PolicyCheckpoint, SubjectInit, TrainConfig, initializers_from_cohort,
                       predict, train)

logger = logging.getLogger(__name__)

METHODS = ("rl", "without_rl")


# ---------------------------------------------------------------------------
# Folds


@dataclass(frozen=True)
class FoldPlan:
    """k rotating test blocks; the rest of each fold is split train/val."""

    k: int
    seed: int
    ratios: tuple[int, int, int]
    train: tuple[tuple[str, ...], ...]
    val: tuple[tuple[str, ...], ...]
    test: tuple[tuple[str, ...], ...]

    @classmethod
    def make(cls, ids: Sequence[str], k: int = 5, ratios=(64, 16, 20), seed: int = 0) -> "FoldPlan":
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if k < 2 or len(ids) < k:
            raise ValueError("need k >= 2 and at least k subjects")
        rng = np.random.default_rng(seed)
        order = [ids[i] for i in rng.permutation(len(ids))]
        blocks = np.array_split(np.arange(len(order)), k)
        total = sum(ratios)
        want_tr, want_va = ratios[0] / total * len(ids), ratios[1] / total * len(ids)
        tr, va, te = [], [], []
        for f in range(k):
            test = [order[i] for i in blocks[f]]
            rest = [order[i] for b, blk in enumerate(blocks) if b != f for i in blk]
            rest = [rest[i] for i in rng.permutation(len(rest))]
            # floor or ceil of the validation target, whichever keeps train closer
            n_val = min((math.floor(want_va), math.ceil(want_va)),
                        key=lambda v: (abs(len(rest) - v - want_tr), v))
            n_val = max(0, min(n_val, len(rest)))
            va.append(tuple(rest[:n_val]))
            tr.append(tuple(rest[n_val:]))
            te.append(tuple(test))
        return cls(k, seed, tuple(ratios), tuple(tr), tuple(va), tuple(te))

    def split(self, cohort: Sequence[SubjectRecord], fold: int):
        by_id = {r.id: r for r in cohort}
        return tuple([by_id[i] for i in ids]
                     for ids in (self.train[fold], self.val[fold], self.test[fold]))


# ---------------------------------------------------------------------------
# Pipeline configuration


@dataclass(frozen=True)
class PipelineConfig:
    lambdas: tuple[float, ...] = (0.5, 1.0, 2.0)
    initial_allocations: tuple[tuple[float, ...], ...] = ((9.0, 1.0), (7.0, 3.0))
    group_keys: tuple[str, ...] = ("feature_a", "feature_b")
    activity_exponent: int = 1
    amyloid: str = "auto"
    methods: tuple[str, ...] = METHODS
    k: int = 5
    ratios: tuple[int, int, int] = (64, 16, 20)
    train: TrainConfig = field(default_factory=lambda: desk_train_config())
    sim: SimConfig = SimConfig()
    seed: int = 0

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if not self.lambdas or not self.initial_allocations:
            raise ValueError("empty hyperparameter grid")

    @classmethod
    def desk(cls, **kw) -> "PipelineConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "PipelineConfig":
        base = dict(lambdas=(0.5, 1.0, 2.0, 4.0, 8.0),
                    initial_allocations=((10.0, 0.0), (9.0, 1.0), (8.0, 2.0), (7.0, 3.0),
                                         (6.0, 4.0)),
                    train=TrainConfig.paper(init_std=0.3))
        base.update(kw)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **kw) -> "PipelineConfig":
        if name == "desk":
            return cls.desk(**kw)
        if name == "paper":
            return cls.paper(**kw)
        raise ValueError(f"unknown preset {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: Mapping, preset: str = "desk") -> "PipelineConfig":
        d = dict(d)
        kw = {}
        for name in ("lambdas", "group_keys", "methods", "ratios"):
            if name in d:
                kw[name] = tuple(d.pop(name))
        if "initial_allocations" in d:
            kw["initial_allocations"] = tuple(tuple(float(v) for v in a)
                                              for a in d.pop("initial_allocations"))
        base = cls.preset(preset)
        if "train" in d:
            kw["train"] = TrainConfig.from_dict({**base.train.to_dict(), **d.pop("train")})
        if "sim" in d:
            kw["sim"] = SimConfig(**d.pop("sim"))
        for name in ("activity_exponent", "amyloid", "k", "seed"):
            if name in d:
                kw[name] = d.pop(name)
        if d:
            raise ValueError(f"unknown pipeline keys {sorted(d)}")
        return replace(base, **kw)


def desk_train_config(**kw) -> TrainConfig:
    """10k episodes as 100 epochs of 100 trajectories."""
    return TrainConfig.desk(**{"batch_trajectories": 100, "init_std": 0.1, **kw})


def task_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Metrics


def cognition_targets(records: Sequence[SubjectRecord], horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """(N, horizon + 1) observed cognition and its availability mask.

    Only follow-up years 1..horizon count; baseline is an input, not a target.
    """
    C = np.full((len(records), horizon + 1), np.nan)
    for k, rec in enumerate(records):
        for j, y in enumerate(rec.years):
            if 1 <= y <= horizon and rec.available["C"][j]:
                C[k, int(y)] = rec.C[j]
    return C, ~np.isnan(C)


def error_stats(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> dict:
    """MAE/MSE over masked entries plus per-subject MAE values."""
    err = np.where(mask, pred - truth, 0.0)
    n = int(mask.sum())
    if n == 0:
        return {"mae": float("nan"), "mse": float("nan"), "n_visits": 0, "subject_mae": []}
    per = mask.sum(axis=1)
    subj = [float(np.abs(err[i]).sum() / per[i]) for i in range(len(per)) if per[i]]
    return {"mae": float(np.abs(err).sum() / n), "mse": float((err ** 2).sum() / n),
            "n_visits": n, "subject_mae": subj}


# ---------------------------------------------------------------------------
# Per-fold work


@dataclass
class CellResult:
    fold: int
    lambda_: float
    population_I0: tuple[float, ...]
    val_mae: float
    val_mse: float
    checkpoint: PolicyCheckpoint


def _fold_table(train_set, config: PipelineConfig, graph) -> ParamTable:
    return fit_param_table(train_set, config.group_keys, graph, config.activity_exponent,
                           config.amyloid)


def _train_cell(args) -> CellResult:
    fold, ci, lam, I0, train_set, val_set, config, graph = args
    table = _fold_table(train_set, config, graph)
    tcfg = replace(config.train, lambda_=lam, population_I0=tuple(I0),
                   seed=task_seed(config.seed, fold, ci))
    inits = initializers_from_cohort(train_set, table, lam, graph, config.amyloid)
    ck = train(tcfg, inits, config.sim, graph)
    vinits = initializers_from_cohort(val_set, table, lam, graph, config.amyloid)
    vrecs = _records_for(val_set, vinits)
    pred = predict(ck.policy, vinits, config.sim, I0, graph)
    truth, mask = cognition_targets(vrecs, config.sim.horizon)
    st = error_stats(pred.C, truth, mask)
    return CellResult(fold, lam, tuple(I0), st["mae"], st["mse"], ck)


def _records_for(records, inits):
    by_id = {r.id: r for r in records}
    return [by_id[i.subject_id] for i in inits]


def _map(fn, tasks, jobs: int):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


# ---------------------------------------------------------------------------
# Grid search


@dataclass
class GridResult:
    lambda_: float
    population_I0: tuple[float, ...]
    rows: list[dict]
    cells: list[CellResult]

    def checkpoint(self, fold: int) -> PolicyCheckpoint:
        for c in self.cells:
            if c.fold == fold and c.lambda_ == self.lambda_ and c.population_I0 == self.population_I0:
                return c.checkpoint
        raise KeyError(fold)


def grid_search_hyperparams(cohort: Sequence[SubjectRecord], plan: FoldPlan,
                            config: PipelineConfig, graph: BrainGraph | None = None,
                            jobs: int = 1, folds: Sequence[int] | None = None) -> GridResult:
    """Train one policy per (fold, lambda, I0) and pick the cell with the
    lowest validation MAE averaged over folds (first in grid order on ties)."""
    graph = graph or default_graph()
    folds = list(range(plan.k)) if folds is None else list(folds)
    grid = [(lam, tuple(I0)) for lam in config.lambdas for I0 in config.initial_allocations]
    tasks = []
    for f in folds:
        tr, va, _ = plan.split(cohort, f)
        for ci, (lam, I0) in enumerate(grid):
            tasks.append((f, ci, lam, I0, tr, va, config, graph))
    cells = _map(_train_cell, tasks, jobs)
    rows = []
    for lam, I0 in grid:
        mine = [c for c in cells if c.lambda_ == lam and c.population_I0 == I0]
        maes = np.array([c.val_mae for c in mine])
        mses = np.array([c.val_mse for c in mine])
        rows.append({"lambda": lam, "I0": I0, "val_mae_mean": float(np.nanmean(maes)),
                     "val_mae_std": float(np.nanstd(maes)), "val_mse_mean": float(np.nanmean(mses)),
                     "val_mse_std": float(np.nanstd(mses)), "fold_mae": maes.tolist()})
    best = min(range(len(rows)), key=lambda i: (rows[i]["val_mae_mean"], i))
    for i, r in enumerate(rows):
        r["selected"] = i == best
    return GridResult(rows[best]["lambda"], rows[best]["I0"], rows, cells)


def write_grid_csv(result: GridResult, path, n_regions: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", *[f"I0_{v + 1}" for v in range(n_regions)], "val_mae_mean",
                    "val_mae_std", "val_mse_mean", "val_mse_std", "selected"])
        for r in result.rows:
            w.writerow([repr(r["lambda"]), *[repr(float(v)) for v in r["I0"]],
                        repr(r["val_mae_mean"]), repr(r["val_mae_std"]),
                        repr(r["val_mse_mean"]), repr(r["val_mse_std"]), int(r["selected"])])


# ---------------------------------------------------------------------------
# Recovery / compensation analysis


@dataclass
class RecoveryReport:
    mean_I: np.ndarray
    mean_Y: np.ndarray
    flags: dict

    def to_dict(self) -> dict:
        return {"mean_I": self.mean_I.tolist(), "mean_Y": self.mean_Y.tolist(),
                "flags": self.flags}


def valid_states(traj: BatchTrajectory) -> np.ndarray:
    """(N, T+1) mask of states reached before any region collapse."""
    t = np.arange(traj.X.shape[1])
    return t[None, :] <= traj.length[:, None]


def mean_curves(traj: BatchTrajectory) -> tuple[np.ndarray, np.ndarray]:
    m = valid_states(traj)[:, :, None]
    cnt = np.maximum(m.sum(axis=0), 1)
    return (np.where(m, traj.I, 0).sum(axis=0) / cnt,
            np.where(m, traj.Y, 0).sum(axis=0) / cnt)


def pattern_flags(mean_I: np.ndarray, mean_Y: np.ndarray) -> dict:
    """Pattern flags computed from cohort-mean curves alone.

    Region 1 is the first column and region 2 the second.
    """
    i1, i2, y2 = mean_I[:, 0], mean_I[:, 1], mean_Y[:, 1]
    comp = bool(np.any((np.diff(i2) > 0) & (np.diff(i1) < 0)))
    peak = int(np.argmax(i2))
    late = bool(peak < len(i2) - 1 and i2[-1] < i2[peak] and i2[peak] > i2[0])
    ypk = int(np.argmax(y2))
    hyper = bool(y2[ypk] > y2[0] and ypk < len(y2) - 1 and y2[-1] < y2[ypk])
    return {"compensation": comp, "late_decline": late, "hypermetabolism": hyper}


def recovery_analysis(traj: BatchTrajectory) -> RecoveryReport:
    mI, mY = mean_curves(traj)
    return RecoveryReport(mI, mY, pattern_flags(mI, mY))


# ---------------------------------------------------------------------------
# Consistency and structure fidelity


@dataclass
class ConsistencyResult:
    mean_correlation: float
    correlations: dict
    excluded: dict


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if np.array_equal(a, b):
        return 1.0 if np.ptp(a) > 0 else None
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def consistency_check(cohort: Sequence[SubjectRecord], policy: GaussianMLPPolicy,
                      table: ParamTable, lambda_: float, population_I0,
                      sim: SimConfig = SimConfig(), graph: BrainGraph | None = None,
                      year_offset: int = 2, amyloid: str = "auto") -> ConsistencyResult:
    """Agreement between predictions anchored at baseline and at ``year_offset``.

    The overlapping segment is years ``year_offset..horizon``. Subjects lacking
    the anchor data, or with a flat predicted segment, are excluded.
    """
    graph = graph or default_graph()
    T = sim.horizon
    if not 0 <= year_offset < T:
        raise ValueError("year_offset must lie in [0, horizon)")
    first = {i.subject_id: i for i in initializers_from_cohort(cohort, table, lambda_, graph,
                                                                amyloid)}
    later = {i.subject_id: i for i in initializers_from_cohort(cohort, table, lambda_, graph,
                                                                amyloid, anchor_year=year_offset)}
    excluded = {r.id: "no anchor data" for r in cohort if r.id not in first or r.id not in later}
    ids = [r.id for r in cohort if r.id in first and r.id in later]
    corr = {}
    if ids:
        a = predict(policy, [first[i] for i in ids], sim, population_I0, graph).C
        b = predict(policy, [later[i] for i in ids], sim, population_I0, graph,
                    horizon=T - year_offset).C
        for k, sid in enumerate(ids):
            r = _pearson(a[k, year_offset:], b[k])
            if r is None:
                excluded[sid] = "zero-variance trajectory"
            else:
                corr[sid] = r
    mean = float(np.mean(list(corr.values()))) if corr else float("nan")
    return ConsistencyResult(mean, corr, excluded)


def structure_fidelity(predicted_X: np.ndarray, records: Sequence[SubjectRecord]) -> np.ndarray:
    """Per-region Pearson correlation of predicted vs observed X over follow-up visits.

    ``predicted_X`` is (N, T+1, V) aligned with ``records``; time index = year.
    """
    pred, obs = [], []
    T = predicted_X.shape[1] - 1
    for k, rec in enumerate(records):
        for j, y in enumerate(rec.years):
            if 1 <= y <= T and rec.available["X"][j]:
                pred.append(predicted_X[k, int(y)])
                obs.append(rec.X[j])
    pred, obs = np.array(pred), np.array(obs)
    if len(pred) < 2:
        return np.full(predicted_X.shape[2], np.nan)
    return np.array([np.corrcoef(pred[:, v], obs[:, v])[0, 1] for v in range(pred.shape[1])])


# ---------------------------------------------------------------------------
# Cross validation


@dataclass
class MetricReport:
    method: str
    folds: list[dict]
    pooled: dict
    trajectories: list[tuple[int, BatchTrajectory, list[SubjectRecord]]]

    @property
    def fold_mae(self) -> np.ndarray:
        return np.array([f["mae"] for f in self.folds])

    @property
    def fold_mse(self) -> np.ndarray:
        return np.array([f["mse"] for f in self.folds])

    def summary_rows(self) -> list[dict]:
        rows = [{"method": self.method, "fold": str(f["fold"]), "mae": f["mae"], "mse": f["mse"],
                 "n_visits": f["n_visits"]} for f in self.folds]
        rows.append({"method": self.method, "fold": "pooled", "mae": self.pooled["mae"],
                     "mse": self.pooled["mse"], "n_visits": self.pooled["n_visits"]})
        rows.append({"method": self.method, "fold": "fold_mean", "mae": float(self.fold_mae.mean()),
                     "mse": float(self.fold_mse.mean()), "n_visits": ""})
        rows.append({"method": self.method, "fold": "fold_std", "mae": float(self.fold_mae.std()),
                     "mse": float(self.fold_mse.std()), "n_visits": ""})
        rows.append({"method": self.method, "fold": "subject_std",
                     "mae": float(np.std(self.pooled["subject_mae"])),
                     "mse": float(np.std(self.pooled["subject_mse"])), "n_visits": ""})
        return rows


@dataclass
class CVResult:
    config: PipelineConfig
    plan: FoldPlan
    grid: GridResult
    reports: dict[str, MetricReport]
    recovery: RecoveryReport | None
    notes: list[str]

    def flags(self) -> dict:
        out = {"lambda": self.grid.lambda_, "population_I0": list(self.grid.population_I0),
               "notes": self.notes}
        if self.recovery is not None:
            out["recovery"] = self.recovery.to_dict()
        out["mae"] = {m: r.pooled["mae"] for m, r in self.reports.items()}
        return out


def run_cv(cohort: Sequence[SubjectRecord], config: PipelineConfig = PipelineConfig(),
           graph: BrainGraph | None = None, jobs: int = 1) -> CVResult:
    """Grid search on validation folds, then baseline-only test prediction."""
    graph = graph or default_graph()
    plan = FoldPlan.make([r.id for r in cohort], config.k, config.ratios, config.seed)
    grid = grid_search_hyperparams(cohort, plan, config, graph, jobs)
    lam, I0 = grid.lambda_, grid.population_I0
    notes = []
    per_method: dict[str, list] = {m: [] for m in config.methods}
    trajs: dict[str, list] = {m: [] for m in config.methods}
    for f in range(plan.k):
        tr, _, te = plan.split(cohort, f)
        table = _fold_table(tr, config, graph)
        for fb in table.metadata.get("fallbacks", []):
            notes.append(f"fold {f}: {fb}")
        inits = initializers_from_cohort(te, table, lam, graph, config.amyloid)
        recs = _records_for(te, inits)
        truth, mask = cognition_targets(recs, config.sim.horizon)
        for m in config.methods:
            if m == "rl":
                traj = predict(grid.checkpoint(f).policy, inits, config.sim, I0, graph)
            else:
                traj = greedy_predictions(inits, I0, config.sim, graph)
            st = error_stats(traj.C, truth, mask)
            err = np.where(mask, traj.C - truth, 0.0)
            per_method[m].append((f, st, err, mask))
            trajs[m].append((f, traj, recs))
    reports = {}
    for m in config.methods:
        folds = [{"fold": f, **{k: v for k, v in st.items() if k != "subject_mae"}}
                 for f, st, _, _ in per_method[m]]
        err = np.concatenate([e for *_, e, _ in per_method[m]])
        mask = np.concatenate([k for *_, k in per_method[m]])
        n = mask.sum()
        per = mask.sum(axis=1)
        ok = per > 0
        pooled = {"mae": float(np.abs(err).sum() / n), "mse": float((err ** 2).sum() / n),
                  "n_visits": int(n),
                  "subject_mae": (np.abs(err).sum(axis=1)[ok] / per[ok]).tolist(),
                  "subject_mse": ((err ** 2).sum(axis=1)[ok] / per[ok]).tolist()}
        reports[m] = MetricReport(m, folds, pooled, trajs[m])
    recovery = None
    if "rl" in reports:
        recovery = recovery_analysis(_concat([t for _, t, _ in reports["rl"].trajectories]))
    return CVResult(config, plan, grid, reports, recovery, notes)


def greedy_predictions(inits: Sequence[SubjectInit], I0, sim: SimConfig, graph) -> BatchTrajectory:
    X0 = np.stack([i.X0 for i in inits])
    D0 = np.stack([i.D0 for i in inits])
    phi0 = np.stack([i.phi0 for i in inits])
    return rollout_without_rl(X0, D0, phi0, np.asarray(I0, dtype=float),
                              [i.params for i in inits], sim, graph)


def _concat(trajs: Sequence[BatchTrajectory]) -> BatchTrajectory:
    names = ("X", "D", "phi", "I", "Y", "C", "M", "actions", "rewards", "length", "collapsed")
    return BatchTrajectory(*[np.concatenate([getattr(t, n) for t in trajs]) for n in names])


# ---------------------------------------------------------------------------
# Output files


def write_metrics_csv(reports: Mapping[str, MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "fold", "mae", "mse", "n_visits"])
        for rep in reports.values():
            for r in rep.summary_rows():
                w.writerow([r["method"], r["fold"], repr(r["mae"]), repr(r["mse"]), r["n_visits"]])


def trajectory_rows(method: str, fold, traj: BatchTrajectory,
                    records: Sequence[SubjectRecord], horizon: int | None = None):
    T = traj.C.shape[1] - 1 if horizon is None else horizon
    truth, mask = cognition_targets(records, T)
    V = traj.X.shape[2]
    for k, rec in enumerate(records):
        for t in range(T + 1):
            c_true = repr(float(truth[k, t])) if mask[k, t] else ""
            if t == 0:
                j = np.flatnonzero(rec.years == 0)
                if len(j) and rec.available["C"][j[0]]:
                    c_true = repr(float(rec.C[j[0]]))
            yield ([method, fold, rec.id, t, repr(float(traj.C[k, t])), c_true]
                   + [repr(float(traj.I[k, t, v])) for v in range(V)]
                   + [repr(float(traj.Y[k, t, v])) for v in range(V)]
                   + [repr(float(traj.X[k, t, v])) for v in range(V)])


def trajectory_header(V: int) -> list[str]:
    return (["method", "fold", "subject", "t", "C_pred", "C_true"]
            + [f"I_{v + 1}" for v in range(V)] + [f"Y_{v + 1}" for v in range(V)]
            + [f"X_{v + 1}" for v in range(V)])


def write_trajectories_csv(reports: Mapping[str, MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = None
        for rep in reports.values():
            for fold, traj, recs in rep.trajectories:
                if header is None:
                    header = trajectory_header(traj.X.shape[2])
                    w.writerow(header)
                w.writerows(trajectory_rows(rep.method, fold, traj, recs))


def write_report(result: CVResult, out_dir, n_regions: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.reports, out / "metrics.csv")
    write_grid_csv(result.grid, out / "grid.csv", n_regions)
    write_trajectories_csv(result.reports, out / "trajectories.csv")
    with open(out / "flags.json", "w") as fh:
        json.dump(result.flags(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "config.json", "w") as fh:
        json.dump(result.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def default_jobs() -> int:
    return max(1, min(8, os.cpu_count() or 1))
