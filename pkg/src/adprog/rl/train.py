"""Batch collection, the training loop, checkpoints and prediction."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..cohort import SubjectRecord
from ..estimation import ParamTable, amyloid_rate
from ..model import (BatchTrajectory, BrainGraph, ModelParams, SimConfig, default_graph,
                     init_amyloid_rate, rollout_batch)
from .gae import compute_gae, make_baseline
from .policy import GaussianMLPPolicy
from .trpo import trpo_update

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "adprog.policy/1"


@dataclass(frozen=True)
class TrainConfig:
    episodes_total: int = 1_000_000
    batch_trajectories: int = 1000
    kl_limit: float = 0.01
    gae_lambda: float = 0.97
    return_discount: float = 1.0
    cg_iterations: int = 10
    cg_damping: float = 1e-5
    line_search_backtracks: int = 15
    backtrack_ratio: float = 0.8
    hidden_sizes: tuple[int, ...] = (32, 32)
    init_std: float = 1.0
    output_gain: float = 0.01
    baseline: str = "mlp"
    normalize_advantages: bool = True
    lambda_: float = 2.0
    population_I0: tuple[float, ...] = (9.0, 1.0)
    reward: str = "full"
    seed: int = 0

    def __post_init__(self):
        if not self.kl_limit > 0:
            raise ValueError("kl_limit must be positive")
        if not 0 < self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in (0, 1]")
        if self.reward not in ("full", "mismatch", "cost"):
            raise ValueError(f"unknown reward {self.reward!r}")

    @property
    def epochs(self) -> int:
        return max(1, math.ceil(self.episodes_total / self.batch_trajectories))

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**{"episodes_total": 10_000, **kw})

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["population_I0"] = list(self.population_I0)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k in {f.name for f in fields(cls)}}
        for k in ("hidden_sizes", "population_I0"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SubjectInit:
    """What the simulator needs to start one subject at baseline."""

    subject_id: str
    X0: np.ndarray
    D0: np.ndarray
    phi0: np.ndarray
    params: ModelParams


def initializers_from_cohort(cohort: Sequence[SubjectRecord], table: ParamTable,
                             lambda_: float | None = None, graph: BrainGraph | None = None,
                             amyloid: str = "auto", anchor_year: int = 0) -> list[SubjectInit]:
    """Baseline initializers from the anchor visit of each record.

    The starting amyloid rate is the observed D when available (synthetic
    data) and otherwise inferred from accumulated amyloid and age. Subjects
    without X and phi at the anchor year are skipped.
    """
    graph = graph or default_graph()
    out = []
    for rec in cohort:
        where = np.flatnonzero(rec.years == anchor_year)
        if len(where) == 0:
            continue
        j = int(where[0])
        if not (rec.available["X"][j] and rec.available["phi"][j]):
            continue
        params = table.for_record(rec)
        if lambda_ is not None:
            params = params.with_lambda(lambda_)
        if amyloid != "phi" and rec.available["D"][j]:
            D0 = rec.D[j].copy()
        else:
            age = rec.demographics.age_baseline + anchor_year
            D0 = init_amyloid_rate(rec.phi[j], graph, max(params.beta, 1e-12), age)
        out.append(SubjectInit(rec.id, rec.X[j].copy(), D0, rec.phi[j].copy(), params))
    return out


def obs_normalization(inits: Sequence[SubjectInit], population_I0,
                      action_clip: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed input shift and scale for the policy network.

    Region sizes are standardized with the baseline cohort statistics and
    allocations are centred on the population I(0) in units of the action
    clip, so that undoing a drift needs only O(1) weights.
    """
    X0 = np.stack([i.X0 for i in inits])
    sd = X0.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    I0 = np.broadcast_to(np.asarray(population_I0, dtype=float), sd.shape)
    offset = np.concatenate([X0.mean(axis=0), I0])
    scale = np.concatenate([1.0 / sd, np.full(sd.shape, 1.0 / action_clip)])
    return offset, scale


def init_information(policy: GaussianMLPPolicy, X0: np.ndarray, population_I0,
                     action_clip: float = 2.0) -> np.ndarray:
    """Per-subject I(0): the population allocation moved by the policy mean."""
    X0 = np.atleast_2d(X0)
    pop = np.broadcast_to(np.asarray(population_I0, dtype=float), X0.shape)
    mu = policy.mean(policy.features(X0, pop))
    return np.maximum(pop + np.clip(mu, -action_clip, action_clip), 0.0)


def reward_function(kind: str, c_task: float):
    if kind == "full":
        return None
    from ..baselines import control_reward
    return control_reward(kind, c_task)


@dataclass
class Batch:
    obs: np.ndarray         # (N, T, 2V) state at each decision
    actions: np.ndarray     # (N, T, V) pre-clip samples
    logp: np.ndarray        # (N, T)
    rewards: np.ndarray     # (N, T)
    valid: np.ndarray       # (N, T)
    traj: BatchTrajectory
    subjects: np.ndarray    # (N,) index into the initializer list

    @property
    def mean_return(self) -> float:
        return float(np.mean(np.sum(self.rewards, axis=1)))

    def decision_rewards(self) -> np.ndarray:
        """Rewards per decision step, with frozen post-collapse rewards
        credited to the last decision before the collapse."""
        r = np.where(self.valid, self.rewards, 0.0)
        tail = np.sum(np.where(self.valid, 0.0, self.rewards), axis=1)
        last = self.valid.sum(axis=1) - 1
        has = last >= 0
        r[np.flatnonzero(has), last[has]] += tail[has]
        return r


def _stack_inits(inits: Sequence[SubjectInit], idx: np.ndarray):
    X0 = np.stack([inits[i].X0 for i in idx])
    D0 = np.stack([inits[i].D0 for i in idx])
    phi0 = np.stack([inits[i].phi0 for i in idx])
    params = [inits[i].params for i in idx]
    return X0, D0, phi0, params


def collect_batch(policy: GaussianMLPPolicy, inits: Sequence[SubjectInit], sim: SimConfig,
                  n_trajectories: int, rng: np.random.Generator, population_I0,
                  graph: BrainGraph | None = None, reward: str = "full",
                  subjects: np.ndarray | None = None, deterministic: bool = False) -> Batch:
    """Sample subjects uniformly with replacement and roll out the policy."""
    graph = graph or default_graph()
    idx = (rng.integers(len(inits), size=n_trajectories) if subjects is None
           else np.asarray(subjects))
    X0, D0, phi0, params = _stack_inits(inits, idx)
    I0 = init_information(policy, X0, population_I0, sim.action_clip)
    n, V = X0.shape
    T = sim.horizon
    obs = np.zeros((n, T, 2 * V))
    logp = np.zeros((n, T))

    def source(X, I_prev, t):
        o = policy.features(X, I_prev)
        obs[:, t - 1] = o
        if deterministic:
            a = policy.mean(o)
            lp = policy.log_prob(o, a)
        else:
            a, lp = policy.sample(o, rng)
        logp[:, t - 1] = lp
        return a

    traj = rollout_batch(X0, D0, phi0, I0, graph, params, sim, source,
                         reward_fn=reward_function(reward, sim.c_task))
    return Batch(obs, traj.actions, logp, traj.rewards, traj.valid, traj, idx)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class PolicyCheckpoint:
    policy: GaussianMLPPolicy
    config: TrainConfig
    curve: list[dict] = field(default_factory=list)
    sim: SimConfig = SimConfig()
    version: str = CHECKPOINT_FORMAT

    def save(self, path) -> None:
        meta = {
            "format": self.version,
            "policy": self.policy.state(),
            "train_config": self.config.to_dict(),
            "sim_config": asdict(self.sim),
            "curve": self.curve,
            "shapes": [list(s) for s in self.policy.net.shapes] + [[self.policy.n_regions]],
        }
        with open(path, "wb") as fh:
            np.savez(fh, flat=self.policy.get_flat(),
                     meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "PolicyCheckpoint":
        with np.load(path, allow_pickle=False) as z:
            flat = z["flat"].copy()
            meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        policy = GaussianMLPPolicy.from_state(meta["policy"], flat)
        return cls(policy, TrainConfig.from_dict(meta["train_config"]), meta["curve"],
                   SimConfig(**meta["sim_config"]), meta["format"])

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_reward", "mean_kl", "surrogate_delta"])
            for row in self.curve:
                w.writerow([row["epoch"], repr(row["mean_reward"]), repr(row["mean_kl"]),
                            repr(row["surrogate_delta"])])


def zero_policy(n_regions: int, hidden=(32, 32), init_std: float = 1.0) -> GaussianMLPPolicy:
    """All-zero weights: mean action 0 everywhere."""
    return GaussianMLPPolicy(n_regions, hidden, init_std=init_std)


# ---------------------------------------------------------------------------
# Training


class TrainingError(RuntimeError):
    pass


def _value_features(batch: Batch, policy: GaussianMLPPolicy, horizon: int) -> np.ndarray:
    n, T, _ = batch.obs.shape
    s = policy.normalize(batch.obs)
    t = np.broadcast_to((np.arange(1, T + 1) / horizon)[None, :, None], (n, T, 1))
    return np.concatenate([s, t], axis=2).reshape(n * T, -1)


def train(config: TrainConfig, inits: Sequence[SubjectInit], sim: SimConfig = SimConfig(),
          graph: BrainGraph | None = None,
          callback: Callable[[dict], None] | None = None) -> PolicyCheckpoint:
    """Train a policy on the given subject initializers.

    Each epoch collects ``batch_trajectories`` rollouts, fits the value
    baseline to rewards-to-go, computes GAE advantages and takes one TRPO
    step. Every trajectory's lambda comes from its initializer's params.
    """
    if not inits:
        raise TrainingError("no subjects to train on")
    graph = graph or default_graph()
    V = inits[0].X0.shape[0]
    rng = np.random.default_rng(config.seed)
    offset, scale = obs_normalization(inits, config.population_I0, sim.action_clip)
    policy = GaussianMLPPolicy(V, config.hidden_sizes, rng, config.init_std,
                               config.output_gain, scale, offset)
    baseline = make_baseline(config.baseline, 2 * V + 1, rng)
    curve = []
    for epoch in range(config.epochs):
        batch = collect_batch(policy, inits, sim, config.batch_trajectories, rng,
                              config.population_I0, graph, config.reward)
        feats = _value_features(batch, policy, sim.horizon)
        n, T = batch.rewards.shape
        values = baseline.predict(feats).reshape(n, T)
        adv, targets = compute_gae(batch.decision_rewards(), values, batch.valid,
                                   config.return_discount, config.gae_lambda,
                                   config.normalize_advantages)
        m = batch.valid.ravel()
        baseline.fit(feats[m], targets.ravel()[m])
        info = trpo_update(policy, batch.obs.reshape(n * T, -1)[m],
                           batch.actions.reshape(n * T, -1)[m], batch.logp.ravel()[m],
                           adv.ravel()[m], config.kl_limit, config.cg_iterations,
                           config.cg_damping, config.line_search_backtracks,
                           config.backtrack_ratio)
        if not np.all(np.isfinite(policy.get_flat())):
            raise TrainingError(f"non-finite policy weights after epoch {epoch}")
        row = {"epoch": epoch, "mean_reward": batch.mean_return, "mean_kl": info.kl,
               "surrogate_delta": info.surrogate_delta, "accepted": info.accepted}
        curve.append(row)
        logger.info("epoch %d mean reward %.3f kl %.5f", epoch, row["mean_reward"], info.kl)
        if callback is not None:
            callback(row)
    return PolicyCheckpoint(policy, config, curve, sim)


# ---------------------------------------------------------------------------
# Prediction


def predict(policy: GaussianMLPPolicy, inits: Sequence[SubjectInit], sim: SimConfig,
            population_I0, graph: BrainGraph | None = None, reward: str = "full",
            horizon: int | None = None) -> BatchTrajectory:
    """Deterministic (mean-action) trajectories from baseline initializers."""
    graph = graph or default_graph()
    idx = np.arange(len(inits))
    X0, D0, phi0, params = _stack_inits(inits, idx)
    I0 = init_information(policy, X0, population_I0, sim.action_clip)

    def source(X, I_prev, t):
        return policy.mean(policy.features(X, I_prev))

    return rollout_batch(X0, D0, phi0, I0, graph, params, sim, source,
                         reward_fn=reward_function(reward, sim.c_task), horizon=horizon)
