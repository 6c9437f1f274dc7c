"""Generalized advantage estimation and state-value baselines."""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from .policy import MLP


def discounted_cumsum(x: np.ndarray, discount: float) -> np.ndarray:
    """Reverse discounted cumulative sum along the last axis."""
    out = np.zeros_like(x, dtype=float)
    acc = np.zeros(x.shape[:-1])
    for t in reversed(range(x.shape[-1])):
        acc = x[..., t] + discount * acc
        out[..., t] = acc
    return out


def compute_gae(rewards: np.ndarray, values: np.ndarray, valid: np.ndarray | None = None,
                return_discount: float = 1.0, gae_lambda: float = 0.97,
                normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and value targets for (N, T) reward arrays.

    Steps past a trajectory's end (``valid`` false) contribute nothing and
    the value after the last valid step is zero. Value targets are the
    discounted rewards-to-go. With ``normalize`` the advantages over valid
    steps are shifted and scaled to zero mean and unit variance.
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    values = np.atleast_2d(np.asarray(values, dtype=float))
    valid = np.ones_like(rewards, dtype=bool) if valid is None else np.atleast_2d(valid)
    r = np.where(valid, rewards, 0.0)
    v = np.where(valid, values, 0.0)
    v_next = np.concatenate([v[:, 1:], np.zeros((v.shape[0], 1))], axis=1)
    deltas = np.where(valid, r + return_discount * v_next - v, 0.0)
    adv = discounted_cumsum(deltas, return_discount * gae_lambda)
    targets = discounted_cumsum(r, return_discount)
    if normalize:
        a = adv[valid]
        std = a.std()
        adv = np.where(valid, (adv - a.mean()) / (std if std > 0 else 1.0), 0.0)
    return adv, targets


class ZeroBaseline:
    def fit(self, feats, targets):
        pass

    def predict(self, feats):
        return np.zeros(feats.shape[0])


class LinearFeatureBaseline:
    """Ridge regression on [s, s^2, t, t^2, t^3, 1]."""

    def __init__(self, reg: float = 1e-5):
        self.reg = reg
        self.coef = None

    @staticmethod
    def _design(feats):
        s, t = feats[:, :-1], feats[:, -1:]
        return np.concatenate([s, s * s, t, t ** 2, t ** 3, np.ones_like(t)], axis=1)

    def fit(self, feats, targets):
        A = self._design(feats)
        reg = self.reg
        for _ in range(5):
            try:
                self.coef = np.linalg.solve(A.T @ A + reg * np.eye(A.shape[1]), A.T @ targets)
                if np.all(np.isfinite(self.coef)):
                    return
            except np.linalg.LinAlgError:
                pass
            reg *= 10

    def predict(self, feats):
        if self.coef is None:
            return np.zeros(feats.shape[0])
        return self._design(feats) @ self.coef


class MLPBaseline:
    """Small value network refit each epoch by L-BFGS on squared error.

    Targets are standardized internally; fits warm-start from the previous
    epoch's weights.
    """

    def __init__(self, in_dim: int, hidden=(32, 32), rng=None, max_iter: int = 100):
        self.net = MLP(in_dim, tuple(hidden), 1, rng or np.random.default_rng(0))
        self.max_iter = max_iter
        self.loc, self.scale = 0.0, 1.0

    def fit(self, feats, targets):
        self.loc = float(targets.mean())
        self.scale = float(targets.std()) or 1.0
        y = (targets - self.loc) / self.scale
        n = feats.shape[0]

        def f(w):
            out, acts = self.net.forward(feats, w)
            r = out[:, 0] - y
            g = self.net.vjp(acts, (2.0 / n) * r[:, None], w)
            return float(r @ r) / n, g

        res = minimize(f, self.net.flat, jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter})
        if np.all(np.isfinite(res.x)):
            self.net.flat = res.x

    def predict(self, feats):
        return self.net(feats)[:, 0] * self.scale + self.loc


def make_baseline(kind: str, in_dim: int, rng=None):
    if kind == "mlp":
        return MLPBaseline(in_dim, rng=rng)
    if kind == "linear":
        return LinearFeatureBaseline()
    if kind == "zero":
        return ZeroBaseline()
    raise ValueError(f"unknown baseline {kind!r}")
