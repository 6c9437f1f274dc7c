"""KL-constrained natural-gradient policy update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import GaussianMLPPolicy, gaussian_kl


def conjugate_gradient(Avp, b: np.ndarray, iters: int = 10,
                       residual_tol: float = 1e-10) -> np.ndarray:
    """Approximately solve ``A x = b`` for symmetric positive definite A."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if rr < residual_tol:
            break
        Ap = Avp(p)
        alpha = rr / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def surrogate(policy: GaussianMLPPolicy, flat, obs, actions, old_logp, adv) -> float:
    ratio = np.exp(policy.log_prob(obs, actions, flat) - old_logp)
    return float(np.mean(ratio * adv))


def surrogate_grad(policy: GaussianMLPPolicy, obs, actions, old_logp, adv, flat=None):
    """Gradient of :func:`surrogate` (ratio-weighted score function)."""
    f = policy.get_flat() if flat is None else flat
    ratio = np.exp(policy.log_prob(obs, actions, f) - old_logp)
    return policy.log_prob_grad(obs, actions, ratio * adv / len(adv), flat)


def mean_kl(policy: GaussianMLPPolicy, obs, old_mu, old_log_std, flat) -> float:
    mu, ls = policy.dist(obs, flat)
    return float(np.mean(gaussian_kl(old_mu, old_log_std, mu, ls)))


@dataclass
class UpdateInfo:
    accepted: bool
    kl: float
    surrogate_delta: float
    step_fraction: float
    grad_norm: float


def trpo_update(policy: GaussianMLPPolicy, obs: np.ndarray, actions: np.ndarray,
                old_logp: np.ndarray, advantages: np.ndarray, kl_limit: float = 0.01,
                cg_iters: int = 10, damping: float = 1e-5, backtracks: int = 15,
                backtrack_ratio: float = 0.8) -> UpdateInfo:
    """One natural-gradient step, updating ``policy`` in place.

    The search direction solves ``F x = g`` by conjugate gradient and is
    scaled so the quadratic KL model equals ``kl_limit``. Backtracking accepts
    the first step that improves the surrogate with mean KL within the
    limit; otherwise the policy is left unchanged.
    """
    old = policy.get_flat()
    old_mu, old_ls = policy.dist(obs)
    old_ls = old_ls.copy()
    g = surrogate_grad(policy, obs, actions, old_logp, advantages)
    gnorm = float(np.linalg.norm(g))
    base = surrogate(policy, old, obs, actions, old_logp, advantages)
    if gnorm == 0.0 or not np.isfinite(gnorm):
        return UpdateInfo(False, 0.0, 0.0, 0.0, gnorm)

    Fvp = lambda v: policy.fisher_vector_product(obs, v) + damping * v
    x = conjugate_gradient(Fvp, g, cg_iters)
    xFx = float(x @ Fvp(x))
    if not xFx > 0:
        return UpdateInfo(False, 0.0, 0.0, 0.0, gnorm)
    full_step = np.sqrt(2.0 * kl_limit / xFx) * x

    frac = 1.0
    for _ in range(backtracks):
        cand = old + frac * full_step
        kl = mean_kl(policy, obs, old_mu, old_ls, cand)
        val = surrogate(policy, cand, obs, actions, old_logp, advantages)
        if np.isfinite(val) and val > base and kl <= kl_limit:
            policy.set_flat(cand)
            return UpdateInfo(True, kl, val - base, frac, gnorm)
        frac *= backtrack_ratio
    policy.set_flat(old)
    return UpdateInfo(False, 0.0, 0.0, 0.0, gnorm)
