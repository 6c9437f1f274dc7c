"""Domain types and the difference-equation simulator.

All state arrays are numpy vectors indexed by region. The batched simulator
(:func:`rollout_batch`) accepts arrays with a leading trajectory axis and is
what the RL and baseline code drive; :func:`rollout` is the single-subject
wrapper around it.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    """Invalid model input (bad graph, degenerate region, bad config)."""


class DegenerateRegionError(ModelError):
    pass


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class BrainGraph:
    region_names: tuple[str, ...]
    adjacency: np.ndarray
    laplacian: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.region_names)


@dataclass(frozen=True)
class ModelParams:
    alpha1: float
    alpha2_gamma: float
    beta: float
    gamma: float = 1.0
    lambda_: float = 1.0
    activity_exponent: int = 1

    def __post_init__(self):
        for name in ("alpha1", "alpha2_gamma", "beta", "gamma", "lambda_"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.activity_exponent not in (1, 2):
            raise ModelError("activity_exponent must be 1 or 2")

    @property
    def alpha2(self) -> float:
        """Activity-driven atrophy rate, recovered from the joint product."""
        return self.alpha2_gamma / self.gamma

    def with_lambda(self, lam: float) -> "ModelParams":
        return replace(self, lambda_=float(lam))


@dataclass(frozen=True)
class Demographics:
    gender: str = "U"
    apoe4: bool = False
    age_baseline: float = 70.0
    education: float = 16.0
    extra: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.age_baseline > 0:
            raise ModelError("age_baseline must be positive")

    def key(self, names: Sequence[str]) -> tuple:
        out = []
        for name in names:
            if name in ("gender", "apoe4", "age_baseline", "education"):
                out.append(getattr(self, name))
            elif name in self.extra:
                out.append(self.extra[name])
            else:
                raise KeyError(f"demographic feature {name!r} not present")
        return tuple(out)


@dataclass(frozen=True)
class SimState:
    t: int
    X: np.ndarray
    D: np.ndarray
    phi: np.ndarray
    I: np.ndarray
    Y: np.ndarray
    C: float
    M: float


@dataclass(frozen=True)
class SimConfig:
    c_task: float = 10.0
    horizon: int = 10
    dt: float = 1.0
    action_clip: float = 2.0
    reward_floor: float = -2000.0
    reward_ceiling: float = 2000.0

    def __post_init__(self):
        if not self.c_task > 0:
            raise ModelError("c_task must be positive")
        if self.horizon < 1:
            raise ModelError("horizon must be >= 1")
        if not self.action_clip > 0:
            raise ModelError("action_clip must be positive")
        if not self.reward_floor < self.reward_ceiling:
            raise ModelError("reward_floor must be below reward_ceiling")
        if not self.dt > 0:
            raise ModelError("dt must be positive")


# ---------------------------------------------------------------------------
# Graph


def build_graph(region_names: Sequence[str], adjacency) -> BrainGraph:
    A = np.array(adjacency, dtype=float)
    names = tuple(str(n) for n in region_names)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ModelError(f"adjacency must be square, got shape {A.shape}")
    if A.shape[0] != len(names):
        raise ModelError("one region name per adjacency row required")
    if not np.array_equal(A, A.T):
        raise ModelError("adjacency must be symmetric")
    if np.any(A < 0):
        raise ModelError("adjacency must be nonnegative")
    if np.any(np.diag(A) != 0):
        raise ModelError("adjacency must have a zero diagonal")
    L = np.diag(A.sum(axis=1)) - A
    A.setflags(write=False)
    L.setflags(write=False)
    return BrainGraph(names, A, L)


def default_graph() -> BrainGraph:
    """Two regions joined by one unit-weight edge."""
    return build_graph(["region_1", "region_2"], [[0.0, 1.0], [1.0, 0.0]])


# ---------------------------------------------------------------------------
# Single-equation steps. All accept (V,) or (N, V) arrays.


def step_amyloid(D, graph: BrainGraph, beta, dt: float = 1.0) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if D.ndim == 2 and beta.ndim == 1:
        beta = beta[:, None]
    return D - dt * beta * (D @ graph.laplacian.T)


def accumulate_amyloid(phi, D, dt: float = 1.0) -> np.ndarray:
    return np.asarray(phi, dtype=float) + dt * np.asarray(D, dtype=float)


def compute_activity(I, X, gamma=1.0, activity_exponent: int = 1) -> np.ndarray:
    I = np.asarray(I, dtype=float)
    X = np.asarray(X, dtype=float)
    if np.any(X <= 0):
        raise DegenerateRegionError("region size must be positive to compute activity")
    if np.any(I < 0):
        raise ModelError("information processing must be nonnegative")
    gamma = np.asarray(gamma, dtype=float)
    if I.ndim == 2 and gamma.ndim == 1:
        gamma = gamma[:, None]
    return gamma * I / X**activity_exponent


def compute_cognition(I) -> np.ndarray | float:
    return np.asarray(I, dtype=float).sum(axis=-1)


def compute_cost(Y) -> np.ndarray | float:
    return np.asarray(Y, dtype=float).sum(axis=-1)


def step_atrophy(X, D, Y, alpha1, alpha2, dt: float = 1.0) -> np.ndarray:
    """Forward-Euler region shrinkage. Nonpositive outputs signal collapse."""
    X = np.asarray(X, dtype=float)
    a1 = np.asarray(alpha1, dtype=float)
    a2 = np.asarray(alpha2, dtype=float)
    if X.ndim == 2:
        if a1.ndim == 1:
            a1 = a1[:, None]
        if a2.ndim == 1:
            a2 = a2[:, None]
    return X - dt * (a1 * np.asarray(D, dtype=float) + a2 * np.asarray(Y, dtype=float))


def compute_reward(C, M, c_task: float, lam, penalized: bool = True,
                   floor: float = -2000.0, ceiling: float = 2000.0):
    """Task reward.

    Unpenalized: ``-(lam * (c_task - C) + M)``. The penalized training form
    uses ``|c_task - C| * 100**max(C - c_task, 0)`` for the mismatch and is
    clamped to ``[floor, ceiling]``.
    """
    C = np.asarray(C, dtype=float)
    M = np.asarray(M, dtype=float)
    if not penalized:
        r = -(lam * (c_task - C) + M)
    else:
        r = -(lam * mismatch_penalty(C, c_task) + M)
        r = np.clip(r, floor, ceiling)
    return float(r) if r.ndim == 0 else r


def mismatch_penalty(C, c_task: float):
    C = np.asarray(C, dtype=float)
    over = np.maximum(C - c_task, 0.0)
    # exponent capped so the product stays finite; reward is clamped anyway
    return np.abs(c_task - C) * np.power(100.0, np.minimum(over, 300.0))


# ---------------------------------------------------------------------------
# Initial amyloid rate from accumulated amyloid


def init_amyloid_rate(phi0, graph: BrainGraph, beta: float, age_baseline: float,
                      onset_age: float = 50.0, t_po_floor: float = 1.0) -> np.ndarray:
    """Amyloid rate for the first year, inferred from baseline accumulation.

    Uses the network-diffusion solution for accumulated amyloid: with
    ``H = U diag(nu) U^T``, ``dphi/dt = beta * Htilde(beta*t_po) phi`` where
    Htilde has ``1/(beta t_po)`` on zero modes and
    ``nu e^{-nu beta t_po} / (1 - e^{-nu beta t_po})`` elsewhere.
    """
    phi0 = np.asarray(phi0, dtype=float)
    if beta <= 0:
        raise ModelError("beta must be positive to infer the amyloid rate")
    t_po = age_baseline - onset_age
    if t_po <= 0:
        warnings.warn(
            f"age {age_baseline} is not past amyloid onset age {onset_age}; "
            f"using t_po={t_po_floor}", RuntimeWarning, stacklevel=2)
        t_po = t_po_floor
    nu, U = np.linalg.eigh(graph.laplacian)
    s = beta * t_po
    tol = 1e-10 * max(1.0, float(np.max(np.abs(nu))))
    diag = np.empty_like(nu)
    for j, n in enumerate(nu):
        if abs(n) <= tol:
            diag[j] = 1.0 / s
        else:
            diag[j] = n * math.exp(-n * s) / -math.expm1(-n * s)
    Ht = (U * diag) @ U.T
    return np.maximum(beta * (Ht @ phi0), 0.0)


# ---------------------------------------------------------------------------
# Rollout

# An action source maps (X, I_prev, t) batches of shape (N, V) to (N, V).
ActionSource = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class BatchTrajectory:
    """Arrays with a leading trajectory axis.

    State arrays have ``horizon + 1`` time entries (baseline first); reward and
    action arrays have ``horizon`` entries, one per decision step. ``length``
    counts valid decision steps; entries past it are frozen copies.
    """

    X: np.ndarray
    D: np.ndarray
    phi: np.ndarray
    I: np.ndarray
    Y: np.ndarray
    C: np.ndarray
    M: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    length: np.ndarray
    collapsed: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def valid(self) -> np.ndarray:
        """(N, horizon) mask of decision steps that actually happened."""
        steps = np.arange(self.rewards.shape[1])
        return steps[None, :] < self.length[:, None]

    def subject(self, k: int) -> "Trajectory":
        n = int(self.length[k])
        states = [
            SimState(t, self.X[k, t].copy(), self.D[k, t].copy(), self.phi[k, t].copy(),
                     self.I[k, t].copy(), self.Y[k, t].copy(), float(self.C[k, t]),
                     float(self.M[k, t]))
            for t in range(n + 1)
        ]
        return Trajectory(states, self.rewards[k, :n].copy(),
                          "region_collapse" if self.collapsed[k] else None)


@dataclass
class Trajectory:
    states: list[SimState]
    rewards: np.ndarray
    truncated: str | None = None

    @property
    def C(self) -> np.ndarray:
        return np.array([s.C for s in self.states])

    @property
    def I(self) -> np.ndarray:
        return np.array([s.I for s in self.states])


def _params_arrays(params: ModelParams | Sequence[ModelParams], n: int):
    if isinstance(params, ModelParams):
        params = [params] * n
    if len(params) != n:
        raise ModelError("one ModelParams per trajectory required")
    get = lambda name: np.array([getattr(p, name) for p in params], dtype=float)
    exps = {p.activity_exponent for p in params}
    if len(exps) != 1:
        raise ModelError("mixed activity exponents in one batch")
    return (get("alpha1"), get("alpha2_gamma"), get("beta"), get("gamma"),
            get("lambda_"), exps.pop())


def initial_state(X0, D0, phi0, I0, params: ModelParams) -> SimState:
    X0 = np.asarray(X0, dtype=float)
    I0 = np.maximum(np.asarray(I0, dtype=float), 0.0)
    Y0 = compute_activity(I0, X0, params.gamma, params.activity_exponent)
    return SimState(0, X0, np.asarray(D0, dtype=float), np.asarray(phi0, dtype=float),
                    I0, Y0, float(I0.sum()), float(Y0.sum()))


def rollout_batch(X0, D0, phi0, I0, graph: BrainGraph,
                  params: ModelParams | Sequence[ModelParams], config: SimConfig,
                  action_source: ActionSource, *, absolute: bool = False,
                  reward_fn: RewardFn | None = None, horizon: int | None = None
                  ) -> BatchTrajectory:
    """Simulate N subjects in lockstep.

    At each step t = 1..horizon the state is advanced from t-1 (atrophy,
    amyloid spread, accumulation), then ``action_source(X(t), I(t-1), t)``
    proposes a change. With ``absolute=True`` the source returns target
    allocations directly and no clipping is applied. Rewards use the penalized
    form unless ``reward_fn(C, M, lam)`` is given.

    A collapsed trajectory keeps its last valid state, and that frozen state
    keeps earning its reward for the rest of the horizon. Otherwise ending
    early would look better than surviving, since rewards are negative.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    n, V = X0.shape
    T = config.horizon if horizon is None else int(horizon)
    a1, a2g, beta, gamma, lam, p = _params_arrays(params, n)
    a2 = a2g / gamma
    dt = config.dt

    def arr(x):
        return np.broadcast_to(np.asarray(x, dtype=float), (n, V)).copy()

    X = np.empty((n, T + 1, V)); D = np.empty_like(X); phi = np.empty_like(X)
    I = np.empty_like(X); Y = np.empty_like(X)
    actions = np.zeros((n, T, V)); rewards = np.zeros((n, T))
    X[:, 0] = X0; D[:, 0] = arr(D0); phi[:, 0] = arr(phi0)
    I[:, 0] = np.maximum(arr(I0), 0.0)
    if np.any(X[:, 0] <= 0):
        raise DegenerateRegionError("initial region sizes must be positive")
    Y[:, 0] = compute_activity(I[:, 0], X[:, 0], gamma, p)
    length = np.full(n, T, dtype=int)
    collapsed = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)

    for t in range(1, T + 1):
        Xn = step_atrophy(X[:, t - 1], D[:, t - 1], Y[:, t - 1], a1, a2, dt)
        Dn = step_amyloid(D[:, t - 1], graph, beta, dt)
        phin = accumulate_amyloid(phi[:, t - 1], D[:, t - 1], dt)
        dead = alive & np.any(Xn <= 0, axis=1)
        if dead.any():
            length[dead] = t - 1
            collapsed[dead] = True
            alive &= ~dead
        # frozen rows carry their last valid state forward
        keep = ~alive
        Xn[keep] = X[keep, t - 1]; Dn[keep] = D[keep, t - 1]; phin[keep] = phi[keep, t - 1]
        X[:, t] = Xn; D[:, t] = Dn; phi[:, t] = phin

        proposal = np.asarray(action_source(Xn, I[:, t - 1].copy(), t), dtype=float)
        if absolute:
            In = np.maximum(proposal, 0.0)
            act = proposal
        else:
            act = proposal
            In = np.maximum(I[:, t - 1] + np.clip(proposal, -config.action_clip,
                                                  config.action_clip), 0.0)
        In[keep] = I[keep, t - 1]
        I[:, t] = In
        Y[:, t] = compute_activity(In, Xn, gamma, p)
        actions[:, t - 1] = act
        Ct = In.sum(axis=1); Mt = Y[:, t].sum(axis=1)
        if reward_fn is None:
            r = compute_reward(Ct, Mt, config.c_task, lam, penalized=True,
                               floor=config.reward_floor, ceiling=config.reward_ceiling)
        else:
            r = np.clip(reward_fn(Ct, Mt, lam), config.reward_floor, config.reward_ceiling)
        rewards[:, t - 1] = r
    C = I.sum(axis=2)
    M = Y.sum(axis=2)
    if collapsed.any():
        logger.debug("%d of %d trajectories truncated by region collapse", collapsed.sum(), n)
    return BatchTrajectory(X, D, phi, I, Y, C, M, actions, rewards, length, collapsed)


def rollout(initial: SimState, action_source: ActionSource, params: ModelParams,
            config: SimConfig, graph: BrainGraph | None = None, *, absolute: bool = False,
            reward_fn: RewardFn | None = None) -> Trajectory:
    """Single-subject rollout; see :func:`rollout_batch` for step semantics."""
    graph = graph or default_graph()
    X0 = np.asarray(initial.X, dtype=float)
    if np.any(X0 <= 0) or np.any(np.asarray(initial.I) < 0):
        raise ModelError("initial state violates X > 0, I >= 0")
    batch = rollout_batch(X0[None], initial.D[None], initial.phi[None], initial.I[None],
                          graph, params, config, action_source, absolute=absolute,
                          reward_fn=reward_fn)
    traj = batch.subject(0)
    if initial.t:
        traj.states = [replace(s, t=s.t + initial.t) for s in traj.states]
    return traj


def zero_action(X, I_prev, t):
    return np.zeros_like(I_prev)
