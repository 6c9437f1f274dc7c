"""Longitudinal subject records, the synthetic cohort generator, visit masking
and the long-format CSV contract."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .model import (BrainGraph, Demographics, ModelError, ModelParams, SimConfig,
                    default_graph, rollout_batch)

logger = logging.getLogger(__name__)

IMAGING_FIELDS = ("X", "phi", "D", "Y")
FIELDS = IMAGING_FIELDS + ("C",)


class CohortError(ValueError):
    pass


@dataclass
class SubjectRecord:
    """One subject's visits in array form.

    ``X``, ``phi``, ``D``, ``Y`` are (K, V); ``C`` and ``years`` are (K,).
    ``available`` maps each field name to a (K,) boolean mask. Values behind a
    false flag are kept as-is (masking only touches flags) or NaN when never
    measured.
    """

    id: str
    demographics: Demographics
    years: np.ndarray
    X: np.ndarray
    phi: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    C: np.ndarray
    available: dict[str, np.ndarray]
    diagnosis: str | None = None

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=int)
        if np.any(np.diff(self.years) <= 0):
            raise CohortError(f"subject {self.id}: years must be strictly increasing")
        if len(self.years) == 0 or self.years[0] != 0:
            raise CohortError(f"subject {self.id}: baseline visit (year 0) missing")
        for f in FIELDS:
            self.available[f] = np.asarray(self.available[f], dtype=bool)

    @property
    def n_regions(self) -> int:
        return self.X.shape[1]

    def has(self, *fields: str) -> np.ndarray:
        m = np.ones(len(self.years), dtype=bool)
        for f in fields:
            m &= self.available[f]
        return m

    def copy(self) -> "SubjectRecord":
        return replace(self, years=self.years.copy(), X=self.X.copy(), phi=self.phi.copy(),
                       D=self.D.copy(), Y=self.Y.copy(), C=self.C.copy(),
                       available={k: v.copy() for k, v in self.available.items()})


def records_equal(a: SubjectRecord, b: SubjectRecord) -> bool:
    """Exact equality, treating NaN == NaN."""
    if (a.id, a.demographics, a.diagnosis) != (b.id, b.demographics, b.diagnosis):
        return False
    if not np.array_equal(a.years, b.years):
        return False
    for f in FIELDS:
        if not np.array_equal(getattr(a, f), getattr(b, f), equal_nan=True):
            return False
        if not np.array_equal(a.available[f], b.available[f]):
            return False
    return True


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass(frozen=True)
class ParamMap:
    """Linear map from the two synthetic demographic features to rates.

    ``rate = intercept + slope_a * feature_a + slope_b * feature_b`` with
    feature_a in {0..3} and feature_b in {0, 1}.
    """

    alpha1: tuple[float, float, float] = (0.30, 0.05, 0.10)
    alpha2: tuple[float, float, float] = (0.04, 0.01, 0.02)
    beta: tuple[float, float, float] = (0.02, 0.005, 0.01)

    def __call__(self, feature_a: int, feature_b: int, gamma: float = 1.0,
                 activity_exponent: int = 1) -> ModelParams:
        lin = lambda c: c[0] + c[1] * feature_a + c[2] * feature_b
        return ModelParams(alpha1=lin(self.alpha1), alpha2_gamma=lin(self.alpha2) * gamma,
                           beta=lin(self.beta), gamma=gamma,
                           activity_exponent=activity_exponent)


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 200
    x0_mean: tuple[float, ...] = (3.5, 3.4)
    x0_cov: tuple[tuple[float, ...], ...] = ((0.49, 0.20), (0.20, 0.64))
    d0_range: tuple[float, float] = (0.0, 0.2)
    y_max: float = 2.5
    c_task: float = 10.0
    gamma: float = 1.0
    activity_exponent: int = 1
    cardinalities: tuple[int, int] = (4, 2)
    param_map: ParamMap = ParamMap()
    total_steps: int = 15
    keep_steps: int = 11
    age_range: tuple[float, float] = (60.0, 85.0)
    max_retries: int = 100
    seed: int = 0

    def __post_init__(self):
        cov = np.asarray(self.x0_cov, dtype=float)
        if not np.allclose(cov, cov.T):
            raise CohortError("x0_cov must be symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise CohortError("x0_cov must be positive definite")
        if len(self.x0_mean) != cov.shape[0]:
            raise CohortError("x0_mean and x0_cov disagree on region count")
        if self.keep_steps > self.total_steps:
            raise CohortError("keep_steps cannot exceed total_steps")
        if self.n_subjects < 1:
            raise CohortError("n_subjects must be positive")

    @property
    def n_regions(self) -> int:
        return len(self.x0_mean)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortConfig":
        d = dict(d)
        if "param_map" in d and not isinstance(d["param_map"], ParamMap):
            d["param_map"] = ParamMap(**{k: tuple(v) for k, v in d["param_map"].items()})
        for k in ("x0_mean", "d0_range", "cardinalities", "age_range"):
            if k in d:
                d[k] = tuple(d[k])
        if "x0_cov" in d:
            d["x0_cov"] = tuple(tuple(r) for r in d["x0_cov"])
        return cls(**d)


def capacity_policy(y_max: float, c_task: float, gamma: float = 1.0,
                    activity_exponent: int = 1):
    """Allocation used to generate synthetic ground truth.

    Regions are filled in index order up to their activity capacity
    ``y_max * X_v**p / gamma`` until the demand ``c_task`` is met.
    Returns an absolute-allocation action source.
    """

    def source(X, I_prev, t):
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        remaining = np.full(X.shape[0], float(c_task))
        for v in range(X.shape[1]):
            out[:, v] = np.minimum(y_max * X[:, v] ** activity_exponent / gamma, remaining)
            remaining = remaining - out[:, v]
        return out

    return source


def generate_cohort(config: CohortConfig = CohortConfig(),
                    graph: BrainGraph | None = None) -> list[SubjectRecord]:
    graph = graph or default_graph()
    V = config.n_regions
    if graph.n_regions != V:
        raise CohortError("graph size does not match the cohort's region count")
    policy = capacity_policy(config.y_max, config.c_task, config.gamma,
                             config.activity_exponent)
    sim = SimConfig(c_task=config.c_task, horizon=config.total_steps - 1)
    start = config.total_steps - config.keep_steps
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_subjects)
    mean = np.asarray(config.x0_mean, dtype=float)
    cov = np.asarray(config.x0_cov, dtype=float)

    out = []
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        fa = int(rng.integers(config.cardinalities[0]))
        fb = int(rng.integers(config.cardinalities[1]))
        age = float(rng.uniform(*config.age_range))
        params = config.param_map(fa, fb, config.gamma, config.activity_exponent)
        # retries redraw the baseline state only, keeping demographic groups balanced
        for attempt in range(config.max_retries):
            X0 = rng.multivariate_normal(mean, cov, method="cholesky")
            D0 = rng.uniform(config.d0_range[0], config.d0_range[1], size=V)
            if np.any(X0 <= 0):
                continue
            I0 = policy(X0[None], np.zeros((1, V)), 0)[0]
            traj = rollout_batch(X0[None], D0[None], np.zeros((1, V)), I0[None], graph,
                                 params, sim, policy, absolute=True)
            if not traj.collapsed[0]:
                break
        else:
            raise CohortError(f"subject {k}: region collapse in {config.max_retries} draws")
        sl = slice(start, config.total_steps)
        K = config.keep_steps
        demo = Demographics(age_baseline=age + start,
                            extra={"feature_a": fa, "feature_b": fb})
        out.append(SubjectRecord(
            id=f"S{k:04d}", demographics=demo, years=np.arange(K),
            X=traj.X[0, sl].copy(), phi=traj.phi[0, sl].copy(), D=traj.D[0, sl].copy(),
            Y=traj.Y[0, sl].copy(), C=traj.C[0, sl].copy(),
            available={f: np.ones(K, dtype=bool) for f in FIELDS}))
    return out


def true_params(config: CohortConfig, record: SubjectRecord) -> ModelParams:
    e = record.demographics.extra
    return config.param_map(e["feature_a"], e["feature_b"], config.gamma,
                            config.activity_exponent)


# ---------------------------------------------------------------------------
# Missing-visit masking

# Imaging retention per follow-up year. Years 8-10 follow the reported
# follow-up counts (60, 17, 4 of 160); earlier years are set so that the
# overall availability over 11 visits averages 31%.
DEFAULT_IMAGING_SCHEDULE = {
    1: 0.30, 2: 0.35, 3: 0.25, 4: 0.30, 5: 0.22, 6: 0.25, 7: 0.23375,
    8: 60 / 160, 9: 17 / 160, 10: 4 / 160,
}
DEFAULT_COGNITION_SCHEDULE = {
    1: 0.90, 2: 0.85, 3: 0.70, 4: 0.70, 5: 0.55, 6: 0.55, 7: 0.45,
    8: 60 / 160, 9: 17 / 160, 10: 4 / 160,
}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_missing_mask(cohort: Sequence[SubjectRecord],
                       imaging_schedule: Mapping[int, float] | None = None,
                       seed: int = 0,
                       cognition_schedule: Mapping[int, float] | None = None
                       ) -> list[SubjectRecord]:
    """Drop visits per follow-up year across the population.

    For each year, exactly ``round(fraction * n)`` subjects keep their imaging
    (X, phi, D, Y); cognition is kept for those subjects plus extra ones up to
    the cognition schedule's count. Baseline is never masked.
    """
    imaging_schedule = DEFAULT_IMAGING_SCHEDULE if imaging_schedule is None else imaging_schedule
    if cognition_schedule is None:
        cognition_schedule = (DEFAULT_COGNITION_SCHEDULE
                              if imaging_schedule is DEFAULT_IMAGING_SCHEDULE
                              else imaging_schedule)
    for sched in (imaging_schedule, cognition_schedule):
        for y, f in sched.items():
            if not 0.0 <= f <= 1.0:
                raise CohortError(f"retention fraction for year {y} outside [0, 1]: {f}")
            if y == 0 and f != 1.0:
                raise CohortError("baseline is always retained")
    rng = np.random.default_rng(seed)
    out = [r.copy() for r in cohort]
    n = len(out)
    years = sorted(set(imaging_schedule) | set(cognition_schedule))
    for y in years:
        if y == 0:
            continue
        holders = [k for k, r in enumerate(out) if y in r.years]
        n_img = min(_round_half_up(imaging_schedule.get(y, 1.0) * n), len(holders))
        n_cog = min(max(_round_half_up(cognition_schedule.get(y, 1.0) * n), n_img),
                    len(holders))
        order = rng.permutation(len(holders))
        img_keep = {holders[i] for i in order[:n_img]}
        cog_keep = {holders[i] for i in order[:n_cog]}
        for k in holders:
            rec = out[k]
            j = int(np.searchsorted(rec.years, y))
            if k not in img_keep:
                for f in IMAGING_FIELDS:
                    rec.available[f][j] = False
            if k not in cog_keep:
                rec.available["C"][j] = False
    return out


# ---------------------------------------------------------------------------
# Long-format CSV

COGNITION_COL = "cognition"


def _region_cols(prefix: str, V: int) -> list[str]:
    return [f"{prefix}_{v + 1}" for v in range(V)]


FIELD_PREFIX = {"X": "x", "phi": "phi", "D": "d", "Y": "y"}
AVAIL_COL = {"X": "avail_x", "phi": "avail_phi", "D": "avail_d", "Y": "avail_y",
             "C": "avail_cognition"}


def export_tabular(cohort: Sequence[SubjectRecord], path, demographics_path=None) -> None:
    """Write visits to ``path`` and demographics to a sibling CSV."""
    path = Path(path)
    demographics_path = Path(demographics_path) if demographics_path else _demo_path(path)
    V = cohort[0].n_regions
    rows = []
    for r in cohort:
        for j, y in enumerate(r.years):
            row = {"subject_id": r.id, "year": int(y)}
            for f, pre in FIELD_PREFIX.items():
                row.update(zip(_region_cols(pre, V), getattr(r, f)[j]))
            row[COGNITION_COL] = r.C[j]
            for f, col in AVAIL_COL.items():
                row[col] = int(r.available[f][j])
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")

    extra_names = sorted({k for r in cohort for k in r.demographics.extra})
    drows = []
    for r in cohort:
        d = r.demographics
        row = {"subject_id": r.id, "gender": d.gender, "apoe4": int(d.apoe4),
               "age_baseline": d.age_baseline, "education": d.education,
               "diagnosis": r.diagnosis if r.diagnosis is not None else ""}
        for k in extra_names:
            row[f"extra_{k}"] = d.extra.get(k, "")
        drows.append(row)
    pd.DataFrame(drows).to_csv(demographics_path, index=False, float_format="%.17g")


def _demo_path(path: Path) -> Path:
    return path.with_name(path.stem + "_demographics.csv")


class IngestResult(list):
    """List of accepted records; ``rejected`` holds (subject_id, reason) pairs."""

    def __init__(self, records=(), rejected=()):
        super().__init__(records)
        self.rejected = list(rejected)


def ingest_tabular(path, demographics_path=None, *, cognition_raw_mmse: bool = False,
                   c_task: float = 10.0, n_regions: int | None = None) -> IngestResult:
    """Read the long-format CSV contract into records.

    Empty cells mark unavailable values; ``avail_*`` columns, when present,
    further restrict availability. Raw MMSE (0-30) is divided by 3. Subjects
    with a missing or incomplete baseline, non-increasing years, or
    out-of-range cognition are rejected and listed in ``result.rejected``.
    """
    path = Path(path)
    demographics_path = Path(demographics_path) if demographics_path else _demo_path(path)
    df = pd.read_csv(path, float_precision="round_trip", dtype={"subject_id": str})
    if n_regions is None:
        n_regions = sum(1 for c in df.columns if c.startswith("x_") and c[2:].isdigit())
    V = n_regions
    if V == 0:
        raise CohortError("no region columns (x_1..x_V) found")
    demo_df = None
    if demographics_path.exists():
        demo_df = pd.read_csv(demographics_path, float_precision="round_trip",
                              dtype={"subject_id": str, "gender": str, "diagnosis": str},
                              keep_default_na=False)
        demo_df = demo_df.set_index("subject_id")

    accepted, rejected = [], []
    for sid, g in df.groupby("subject_id", sort=False):
        years = g["year"].to_numpy()
        if np.any(np.diff(years) <= 0):
            rejected.append((sid, "years not strictly increasing"))
            continue
        if years[0] != 0:
            rejected.append((sid, "missing baseline row"))
            continue
        K = len(g)
        vals, avail = {}, {}
        for f, pre in FIELD_PREFIX.items():
            cols = _region_cols(pre, V)
            if all(c in g for c in cols):
                a = g[cols].to_numpy(dtype=float)
            else:
                a = np.full((K, V), np.nan)
            vals[f] = a
            avail[f] = ~np.isnan(a).any(axis=1)
        C = g[COGNITION_COL].to_numpy(dtype=float) if COGNITION_COL in g else np.full(K, np.nan)
        avail["C"] = ~np.isnan(C)
        for f, col in AVAIL_COL.items():
            if col in g:
                avail[f] &= g[col].fillna(0).to_numpy().astype(bool)
        if cognition_raw_mmse:
            if np.any((C[avail["C"]] < 0) | (C[avail["C"]] > 30)):
                rejected.append((sid, "MMSE outside [0, 30]"))
                continue
            C = C / 3.0
        elif np.any((C[avail["C"]] < 0) | (C[avail["C"]] > c_task)):
            rejected.append((sid, f"cognition outside [0, {c_task}]"))
            continue
        if not (avail["X"][0] and avail["phi"][0] and avail["C"][0]):
            rejected.append((sid, "baseline lacks X, phi or cognition"))
            continue
        demo, diagnosis = Demographics(), None
        if demo_df is not None:
            if sid not in demo_df.index:
                rejected.append((sid, "no demographics row"))
                continue
            demo, diagnosis = _parse_demographics(demo_df.loc[sid])
        accepted.append(SubjectRecord(sid, demo, years, vals["X"], vals["phi"], vals["D"],
                                      vals["Y"], C, avail, diagnosis))
    for sid, reason in rejected:
        logger.warning("rejected subject %s: %s", sid, reason)
    return IngestResult(accepted, rejected)


def _parse_demographics(row) -> tuple[Demographics, str | None]:
    extra = {}
    for col, val in row.items():
        if col.startswith("extra_") and val != "":
            extra[col[len("extra_"):]] = int(val)
    diagnosis = row.get("diagnosis", "")
    demo = Demographics(gender=str(row.get("gender", "U")),
                        apoe4=bool(int(row.get("apoe4", 0))),
                        age_baseline=float(row.get("age_baseline", 70.0)),
                        education=float(row.get("education", 16.0)),
                        extra=extra)
    return demo, (diagnosis if diagnosis != "" else None)
