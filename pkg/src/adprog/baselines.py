"""Per-step greedy allocation (no RL) and the single-term control rewards."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .model import (BatchTrajectory, BrainGraph, ModelParams, SimConfig, SimState,
                    default_graph, mismatch_penalty, rollout_batch)

GRID_STEP = 0.1
GRID_MAX = 10.4


def allocation_grid(n_regions: int, grid_step: float = GRID_STEP,
                    grid_max: float = GRID_MAX) -> np.ndarray:
    """All allocations on the product grid, in descending lexicographic order.

    Putting larger allocations to lower-index regions first means the first
    maximiser found is the tie-break winner.
    """
    k = int(round(grid_max / grid_step))
    levels = np.arange(k, -1, -1) / round(1.0 / grid_step)
    return np.array(list(itertools.product(levels, repeat=n_regions)), dtype=float)


def greedy_grid_policy(state: SimState | np.ndarray, params: ModelParams | Sequence[ModelParams],
                       config: SimConfig = SimConfig(), grid_step: float = GRID_STEP,
                       grid_max: float = GRID_MAX, rel_tol: float = 1e-12) -> np.ndarray:
    """Allocation maximizing the instantaneous penalized reward on the grid.

    ``state`` is a SimState or a (V,) or (N, V) array of region sizes; with an array
    a list of params (one per row) may be given. Cost grows exponentially with
    the number of regions (grid size ``(grid_max/grid_step + 1) ** V``).
    """
    X = np.asarray(state.X if isinstance(state, SimState) else state, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    n, V = X.shape
    if isinstance(params, ModelParams):
        params = [params] * n
    grid = allocation_grid(V, grid_step, grid_max)
    C = grid.sum(axis=1)
    pen = mismatch_penalty(C, config.c_task)
    out = np.empty((n, V))
    for k in range(n):
        p = params[k]
        unit_cost = p.gamma / X[k] ** p.activity_exponent
        M = grid @ unit_cost
        r = np.clip(-(p.lambda_ * pen + M), config.reward_floor, config.reward_ceiling)
        best = r.max()
        thresh = best - rel_tol * max(1.0, abs(best))
        out[k] = grid[int(np.argmax(r >= thresh))]
    return out[0] if single else out


def greedy_source(params: Sequence[ModelParams], config: SimConfig, **grid_kw):
    def source(X, I_prev, t):
        return greedy_grid_policy(X, params, config, **grid_kw)
    return source


def rollout_without_rl(X0, D0, phi0, I0, params: ModelParams | Sequence[ModelParams],
                       config: SimConfig = SimConfig(), graph: BrainGraph | None = None,
                       horizon: int | None = None, **grid_kw) -> BatchTrajectory:
    """Simulate with the greedy grid allocation chosen afresh each year.

    The grid proposes absolute allocations, so the per-step action clip of
    the RL agent does not apply here.
    """
    graph = graph or default_graph()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    n = X0.shape[0]
    plist = [params] * n if isinstance(params, ModelParams) else list(params)
    return rollout_batch(X0, D0, phi0, I0, graph, plist, config,
                         greedy_source(plist, config, **grid_kw), absolute=True,
                         horizon=horizon)


def control_reward(kind: str, c_task: float = 10.0):
    """Single-term reward, as a ``reward_fn(C, M, lam)`` for the simulator.

    ``"mismatch"`` keeps only the (overshoot-penalized) cognition deficit and
    ``"cost"`` only the energetic cost, negated so that lower cost scores
    higher. Neither uses lambda.
    """
    if kind == "mismatch":
        return lambda C, M, lam=None: -mismatch_penalty(C, c_task)
    if kind == "cost":
        return lambda C, M, lam=None: -np.asarray(M, dtype=float)
    raise ValueError(f"unknown control reward {kind!r}")
