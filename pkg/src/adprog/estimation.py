"""Closed-form least-squares estimators for the model rates.

Forward differences are taken between consecutive *observed* visits of a
subject, with ``dt`` equal to the actual gap in years, so masked visits are
skipped rather than interpolated.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import SubjectRecord
from .model import BrainGraph, Demographics, ModelError, ModelParams, default_graph

logger = logging.getLogger(__name__)


class NonIdentifiableError(ModelError):
    """The least-squares problem has no unique minimiser on this data."""


# ---------------------------------------------------------------------------
# Transition extraction


def _pairs(mask: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(mask)
    return list(zip(idx[:-1], idx[1:]))


def amyloid_rate(record: SubjectRecord, source: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Per-visit amyloid rate D and its availability.

    ``source="observed"`` uses the D columns, ``"phi"`` forward-differences the
    accumulated amyloid between consecutive observed visits, and ``"auto"``
    prefers observed D where flagged available and falls back to phi.
    """
    K, V = record.phi.shape
    D = np.full((K, V), np.nan)
    avail = np.zeros(K, dtype=bool)
    if source in ("phi", "auto"):
        for i, j in _pairs(record.available["phi"]):
            D[i] = (record.phi[j] - record.phi[i]) / (record.years[j] - record.years[i])
            avail[i] = True
    if source in ("observed", "auto"):
        obs = record.available["D"]
        D[obs] = record.D[obs]
        avail = avail | obs
    elif source != "phi":
        raise ValueError(f"unknown amyloid source {source!r}")
    return D, avail


@dataclass
class Transitions:
    """Stacked (visit, next observed visit) pairs over a set of subjects."""

    X: np.ndarray
    dX: np.ndarray
    D: np.ndarray
    dD: np.ndarray
    Y: np.ndarray
    C: np.ndarray

    def __len__(self):
        return len(self.C)


def collect_transitions(subjects: Iterable[SubjectRecord], need: Sequence[str],
                        amyloid: str = "auto", change: str = "X") -> Transitions:
    """Gather forward differences of ``change`` (``"X"`` or ``"D"``).

    A visit contributes when every field in ``need`` is available there and
    the changing field is available at the pair's end.
    """
    rows = {k: [] for k in ("X", "dX", "D", "dD", "Y", "C")}
    for rec in subjects:
        D, d_avail = amyloid_rate(rec, amyloid)
        avail = dict(rec.available)
        avail["D"] = d_avail
        m = np.ones(len(rec.years), dtype=bool)
        for f in need:
            m &= avail[f]
        m &= avail[change]
        for i, j in _pairs(avail[change]):
            if not m[i]:
                continue
            dt = float(rec.years[j] - rec.years[i])
            rows["X"].append(rec.X[i])
            rows["D"].append(D[i])
            rows["Y"].append(rec.Y[i])
            rows["C"].append(rec.C[i])
            rows["dX"].append((rec.X[j] - rec.X[i]) / dt if change == "X" else rec.X[i] * np.nan)
            rows["dD"].append((D[j] - D[i]) / dt if change == "D" else D[i] * np.nan)
    if not rows["C"]:
        return Transitions(*(np.empty((0, 0)) for _ in range(5)), np.empty(0))
    return Transitions(*(np.array(rows[k], dtype=float) for k in ("X", "dX", "D", "dD", "Y")),
                       np.array(rows["C"], dtype=float))


# ---------------------------------------------------------------------------
# beta


def estimate_beta(subjects: Iterable[SubjectRecord], graph: BrainGraph | None = None,
                  amyloid: str = "auto") -> float:
    graph = graph or default_graph()
    tr = collect_transitions(subjects, ("D",), amyloid, change="D")
    if len(tr) == 0:
        raise NonIdentifiableError("beta: no consecutive observed amyloid pairs")
    HD = tr.D @ graph.laplacian.T
    num = np.sum(HD * tr.dD)
    den = np.sum(HD * HD)
    if den <= 0:
        raise NonIdentifiableError("beta: sum of D^T H^T H D is zero (amyloid in Laplacian nullspace)")
    return float(-num / den)


def beta_objective(beta, tr: Transitions, graph: BrainGraph) -> float:
    r = tr.dD + beta * (tr.D @ graph.laplacian.T)
    return float(np.sum(r * r))


# ---------------------------------------------------------------------------
# alpha1 and alpha2*gamma without activity data


@dataclass(frozen=True)
class KConstants:
    K1: float
    K2: float
    K3: float
    K4: float
    K5: float


def atrophy_features(tr: Transitions, activity_exponent: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Scalars a1 = sum_v X^p dX/dt and a2 = sum_v X^p D per transition."""
    w = tr.X ** activity_exponent
    return np.sum(w * tr.dX, axis=1), np.sum(w * tr.D, axis=1)


def k_constants(a1, a2, C) -> KConstants:
    return KConstants(float(a1 @ a1), float(a2 @ a2), float(a1 @ a2),
                      float(a1 @ C), float(a2 @ C))


def solve_k(K: KConstants) -> tuple[float, float]:
    """(alpha1, 1/(alpha2*gamma)) from the normal equations."""
    den_a = K.K2 * K.K4 - K.K3 * K.K5
    den_d = K.K3 ** 2 - K.K1 * K.K2
    scale = max(abs(K.K1 * K.K2), abs(K.K3 ** 2), abs(K.K2 * K.K4), abs(K.K3 * K.K5), 1e-300)
    if abs(den_a) <= 1e-14 * scale:
        raise NonIdentifiableError("alpha: K2*K4 - K3*K5 vanishes")
    if abs(den_d) <= 1e-14 * scale:
        raise NonIdentifiableError("alpha: K3^2 - K1*K2 vanishes")
    alpha1 = (K.K1 * K.K5 - K.K3 * K.K4) / den_a
    inv_a2g = den_a / den_d
    if inv_a2g == 0:
        raise NonIdentifiableError("alpha: K2*K4 - K3*K5 vanishes")
    return alpha1, inv_a2g


def estimate_alpha1_alpha2gamma(subjects: Iterable[SubjectRecord], activity_exponent: int = 1,
                                amyloid: str = "auto") -> tuple[float, float]:
    """Joint estimate of (alpha1, alpha2*gamma) from size, amyloid and cognition."""
    tr = collect_transitions(subjects, ("X", "D", "C"), amyloid)
    if len(tr) < 2:
        raise NonIdentifiableError("alpha: fewer than two usable transitions")
    a1, a2 = atrophy_features(tr, activity_exponent)
    K = k_constants(a1, a2, tr.C)
    if K.K4 == 0 and K.K5 == 0:
        raise NonIdentifiableError("alpha: K4 and K5 vanish (cognition identically zero)")
    alpha1, inv = solve_k(K)
    return float(alpha1), float(1.0 / inv)


def estimators_inverse_square(subjects: Iterable[SubjectRecord],
                              amyloid: str = "auto") -> tuple[float, float]:
    return estimate_alpha1_alpha2gamma(subjects, activity_exponent=2, amyloid=amyloid)


def alpha_objective(delta1, delta2, a1, a2, C):
    """Squared cognition residual as a function of (1/(alpha2 gamma), alpha1).

    Broadcasts over array-valued ``delta1``/``delta2``.
    """
    d1 = np.asarray(delta1, dtype=float)[..., None]
    d2 = np.asarray(delta2, dtype=float)[..., None]
    r = C + d1 * a1 + d1 * d2 * a2
    return np.sum(r * r, axis=-1)


# ---------------------------------------------------------------------------
# With activity data (synthetic only in practice)


def estimate_gamma_withY(subjects: Iterable[SubjectRecord], activity_exponent: int = 1) -> float:
    YX, C = [], []
    for rec in subjects:
        m = rec.has("X", "Y", "C")
        YX.append(np.sum(rec.Y[m] * rec.X[m] ** activity_exponent, axis=1))
        C.append(rec.C[m])
    YX = np.concatenate(YX) if YX else np.empty(0)
    C = np.concatenate(C) if C else np.empty(0)
    den = float(YX @ YX)
    if den == 0:
        raise NonIdentifiableError("gamma: sum of (Y^T X)^2 is zero")
    psi = float(C @ YX) / den
    if psi == 0:
        raise NonIdentifiableError("gamma: estimated 1/gamma is zero")
    return 1.0 / psi


def gamma_objective(gamma, subjects: Iterable[SubjectRecord], activity_exponent: int = 1) -> float:
    total = 0.0
    for rec in subjects:
        m = rec.has("X", "Y", "C")
        r = rec.C[m] - np.sum(rec.Y[m] * rec.X[m] ** activity_exponent, axis=1) / gamma
        total += float(r @ r)
    return total


def estimate_alpha_withY(subjects: Iterable[SubjectRecord], amyloid: str = "auto") -> tuple[float, float]:
    tr = collect_transitions(subjects, ("X", "D", "Y"), amyloid)
    if len(tr) == 0:
        raise NonIdentifiableError("alpha: no usable transitions with activity")
    # Q(t) = [D Y] stacked over regions and transitions
    Q = np.stack([tr.D.ravel(), tr.Y.ravel()], axis=1)
    QtQ = Q.T @ Q
    if abs(np.linalg.det(QtQ)) <= 1e-14 * max(np.abs(QtQ).max() ** 2, 1e-300):
        raise NonIdentifiableError("alpha: sum Q^T Q is singular")
    alpha = -np.linalg.solve(QtQ, Q.T @ tr.dX.ravel())
    return float(alpha[0]), float(alpha[1])


def alpha_withY_objective(alpha1, alpha2, tr: Transitions) -> float:
    r = tr.dX + alpha1 * tr.D + alpha2 * tr.Y
    return float(np.sum(r * r))


# ---------------------------------------------------------------------------
# Group table


@dataclass
class ParamTable:
    """Demographic key tuple -> ModelParams, with a pooled fallback."""

    keys: tuple[str, ...]
    entries: dict[tuple, ModelParams]
    pooled: ModelParams
    metadata: dict = field(default_factory=dict)

    def lookup(self, demographics: Demographics, subject_id: str | None = None) -> ModelParams:
        key = self._key(demographics, subject_id)
        if key in self.entries:
            return self.entries[key]
        self.metadata.setdefault("fallbacks", [])
        if list(key) not in self.metadata["fallbacks"]:
            self.metadata["fallbacks"].append(list(key))
        return self.pooled

    def _key(self, demographics, subject_id):
        if self.keys == ("id",):
            return (subject_id,)
        return demographics.key(self.keys)

    def for_record(self, rec: SubjectRecord) -> ModelParams:
        return self.lookup(rec.demographics, rec.id)

    def with_lambda(self, lam: float) -> "ParamTable":
        return ParamTable(self.keys, {k: p.with_lambda(lam) for k, p in self.entries.items()},
                          self.pooled.with_lambda(lam), dict(self.metadata))

    # serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        def p2d(p: ModelParams):
            return {"alpha1": p.alpha1, "alpha2_gamma": p.alpha2_gamma, "beta": p.beta,
                    "gamma": p.gamma}
        return {
            "format": "adprog.param_table/1",
            "keys": list(self.keys),
            "activity_exponent": self.pooled.activity_exponent,
            "groups": [{"key": [_jsonable(k) for k in key], **p2d(p)}
                       for key, p in self.entries.items()],
            "pooled": p2d(self.pooled),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParamTable":
        if d.get("format") != "adprog.param_table/1":
            raise ValueError(f"unsupported parameter table format {d.get('format')!r}")
        p = d.get("activity_exponent", 1)
        mk = lambda g: ModelParams(g["alpha1"], g["alpha2_gamma"], g["beta"], g["gamma"],
                                   activity_exponent=p)
        entries = {tuple(g["key"]): mk(g) for g in d["groups"]}
        return cls(tuple(d["keys"]), entries, mk(d["pooled"]), dict(d.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ParamTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def estimate_params(subjects: Sequence[SubjectRecord], graph: BrainGraph | None = None,
                    activity_exponent: int = 1, amyloid: str = "auto") -> ModelParams:
    """beta, alpha1 and alpha2*gamma pooled over ``subjects``; gamma fixed at 1."""
    beta = estimate_beta(subjects, graph, amyloid)
    a1, a2g = estimate_alpha1_alpha2gamma(subjects, activity_exponent, amyloid)
    return ModelParams(alpha1=a1, alpha2_gamma=a2g, beta=beta,
                       activity_exponent=activity_exponent)


def _clamped_estimate(subjects, graph, activity_exponent, amyloid, label, notes):
    beta = estimate_beta(subjects, graph, amyloid)
    a1, a2g = estimate_alpha1_alpha2gamma(subjects, activity_exponent, amyloid)
    raw = {"alpha1": a1, "alpha2_gamma": a2g, "beta": beta}
    for name, v in raw.items():
        if v < 0:
            notes.append(f"{label}: negative {name} estimate {v:.4g} clamped to 0")
            raw[name] = 0.0
    return ModelParams(activity_exponent=activity_exponent, **raw)


def fit_param_table(subjects: Sequence[SubjectRecord], keys: Sequence[str] = (),
                    graph: BrainGraph | None = None, activity_exponent: int = 1,
                    amyloid: str = "auto", fold: str | int | None = None) -> ParamTable:
    """One parameter set per demographic combination, pooling member visits.

    ``keys=("id",)`` gives per-individual estimates. Groups whose estimate is
    not identifiable are omitted (with a warning); lookups of missing keys fall
    back to the all-subject estimate.
    """
    keys = tuple(keys)
    graph = graph or default_graph()
    notes: list[str] = []
    pooled = _clamped_estimate(subjects, graph, activity_exponent, amyloid, "pooled", notes)
    groups: dict[tuple, list[SubjectRecord]] = {}
    for rec in subjects:
        key = (rec.id,) if keys == ("id",) else rec.demographics.key(keys)
        groups.setdefault(key, []).append(rec)
    entries, counts, omitted = {}, {}, []
    for key in sorted(groups, key=repr):
        members = groups[key]
        try:
            entries[key] = _clamped_estimate(members, graph, activity_exponent, amyloid,
                                             repr(key), notes)
            counts[repr(key)] = len(members)
        except NonIdentifiableError as exc:
            omitted.append([_jsonable(k) for k in key])
            warnings.warn(f"group {key} omitted: {exc}", RuntimeWarning, stacklevel=2)
    for n in notes:
        logger.info(n)
    meta = {"fold": fold, "n_subjects": len(subjects), "group_sizes": counts,
            "omitted_groups": omitted, "notes": notes}
    return ParamTable(keys, entries, pooled, meta)
