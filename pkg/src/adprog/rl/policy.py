"""Feedforward networks in plain numpy with explicit reverse- and forward-mode
derivatives, and the diagonal Gaussian policy built on them."""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class MLP:
    """tanh MLP with a linear output layer and a flat parameter vector.

    Layout of the flat vector: ``W1, b1, W2, b2, ..., Wout, bout`` (row-major).
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int,
                 rng: np.random.Generator | None = None, output_gain: float = 1.0):
        self.sizes = (in_dim, *hidden, out_dim)
        self.shapes = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes += [(a, b), (b,)]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)
        self.flat = np.zeros(self.n_params)
        if rng is not None:
            self.init(rng, output_gain)

    def init(self, rng: np.random.Generator, output_gain: float = 1.0) -> None:
        parts = []
        n_layers = len(self.sizes) - 1
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = math.sqrt(6.0 / (a + b))
            W = rng.uniform(-limit, limit, size=(a, b))
            if k == n_layers - 1:
                W *= output_gain
            parts += [W.ravel(), np.zeros(b)]
        self.flat = np.concatenate(parts)

    def unpack(self, flat: np.ndarray | None = None) -> list[np.ndarray]:
        flat = self.flat if flat is None else flat
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(flat[i:i + n].reshape(s))
            i += n
        return out

    def forward(self, x: np.ndarray, flat: np.ndarray | None = None):
        """Returns (output, activations) where activations feed vjp/jvp."""
        p = self.unpack(flat)
        acts = [x]
        h = x
        n_layers = len(p) // 2
        for k in range(n_layers):
            z = h @ p[2 * k] + p[2 * k + 1]
            h = np.tanh(z) if k < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x, flat=None):
        return self.forward(x, flat)[0]

    def vjp(self, acts: list[np.ndarray], g_out: np.ndarray,
            flat: np.ndarray | None = None) -> np.ndarray:
        """Gradient of ``sum(g_out * output)`` w.r.t. the flat parameters."""
        p = self.unpack(flat)
        n_layers = len(p) // 2
        grads = [None] * len(p)
        g = g_out
        for k in reversed(range(n_layers)):
            if k < n_layers - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = g @ p[2 * k].T
        return np.concatenate([q.ravel() for q in grads])

    def jvp(self, acts: list[np.ndarray], v: np.ndarray,
            flat: np.ndarray | None = None) -> np.ndarray:
        """Directional derivative of the output along flat tangent ``v``."""
        p = self.unpack(flat)
        dp = self.unpack(v)
        n_layers = len(p) // 2
        dh = np.zeros_like(acts[0])
        for k in range(n_layers):
            dz = dh @ p[2 * k] + acts[k] @ dp[2 * k] + dp[2 * k + 1]
            dh = dz * (1.0 - acts[k + 1] ** 2) if k < n_layers - 1 else dz
        return dh


class GaussianMLPPolicy:
    """Diagonal Gaussian over per-region changes in information processing.

    The state vector is ``[X, I_prev]``; it is shifted by ``obs_offset`` and
    multiplied by ``obs_scale`` before entering the network. ``log_std`` is a
    learned state-independent vector. Log-probabilities refer to the raw (pre-clip) sample.
    """

    def __init__(self, n_regions: int, hidden: tuple[int, ...] = (32, 32),
                 rng: np.random.Generator | None = None, init_std: float = 1.0,
                 output_gain: float = 0.01, obs_scale=None, obs_offset=None):
        self.n_regions = n_regions
        self.net = MLP(2 * n_regions, tuple(hidden), n_regions, rng, output_gain)
        self.log_std = np.full(n_regions, math.log(init_std))
        self.obs_scale = (np.ones(2 * n_regions) if obs_scale is None
                          else np.asarray(obs_scale, dtype=float))
        self.obs_offset = (np.zeros(2 * n_regions) if obs_offset is None
                           else np.asarray(obs_offset, dtype=float))

    # flat parameter view -------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.net.n_params + self.n_regions

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.net.flat, self.log_std])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        self.net.flat = flat[:self.net.n_params].copy()
        self.log_std = flat[self.net.n_params:].copy()

    def split(self, flat):
        return flat[:self.net.n_params], flat[self.net.n_params:]

    # distribution ---------------------------------------------------------

    def features(self, X, I_prev) -> np.ndarray:
        return np.concatenate([np.atleast_2d(X), np.atleast_2d(I_prev)], axis=-1)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.obs_offset) * self.obs_scale

    def mean(self, obs: np.ndarray, flat: np.ndarray | None = None) -> np.ndarray:
        w = None if flat is None else self.split(flat)[0]
        return self.net(self.normalize(obs), w)

    def dist(self, obs, flat=None):
        if flat is None:
            return self.mean(obs), self.log_std
        return self.mean(obs, flat), self.split(flat)[1]

    def log_prob(self, obs, actions, flat=None) -> np.ndarray:
        mu, log_std = self.dist(obs, flat)
        return gaussian_log_prob(actions, mu, log_std)

    def sample(self, obs, rng: np.random.Generator):
        mu = self.mean(obs)
        a = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return a, gaussian_log_prob(a, mu, self.log_std)

    def copy(self) -> "GaussianMLPPolicy":
        other = GaussianMLPPolicy.__new__(GaussianMLPPolicy)
        other.n_regions = self.n_regions
        other.net = MLP(*_mlp_dims(self.net))
        other.net.flat = self.net.flat.copy()
        other.log_std = self.log_std.copy()
        other.obs_scale = self.obs_scale.copy()
        other.obs_offset = self.obs_offset.copy()
        return other

    # derivatives ---------------------------------------------------------

    def log_prob_grad(self, obs, actions, weights, flat=None) -> np.ndarray:
        """Gradient of ``sum_i weights_i * log pi(a_i | s_i)``."""
        w = None if flat is None else self.split(flat)[0]
        log_std = self.log_std if flat is None else self.split(flat)[1]
        mu, acts = self.net.forward(self.normalize(obs), w)
        inv_var = np.exp(-2.0 * log_std)
        diff = actions - mu
        g_mu = weights[:, None] * diff * inv_var
        g_ls = np.sum(weights[:, None] * (diff * diff * inv_var - 1.0), axis=0)
        return np.concatenate([self.net.vjp(acts, g_mu, w), g_ls])

    def fisher_vector_product(self, obs: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Hessian of the mean KL at the current parameters, applied to ``v``.

        For a diagonal Gaussian with state-independent log-std the Fisher
        matrix is block-diagonal: ``mean_s J^T diag(1/sigma^2) J`` for the
        network weights and ``2 I`` for the log-std entries.
        """
        v_net, v_ls = self.split(np.asarray(v, dtype=float))
        mu, acts = self.net.forward(self.normalize(obs))
        Jv = self.net.jvp(acts, v_net)
        u = Jv * np.exp(-2.0 * self.log_std) / obs.shape[0]
        return np.concatenate([self.net.vjp(acts, u), 2.0 * v_ls])

    # serialization ---------------------------------------------------------

    def state(self) -> dict:
        return {"hidden": list(self.net.sizes[1:-1]), "n_regions": self.n_regions,
                "obs_scale": self.obs_scale.tolist(), "obs_offset": self.obs_offset.tolist()}

    @classmethod
    def from_state(cls, state: dict, flat: np.ndarray) -> "GaussianMLPPolicy":
        p = cls(state["n_regions"], tuple(state["hidden"]), obs_scale=state["obs_scale"],
                obs_offset=state.get("obs_offset"))
        p.set_flat(flat)
        return p


def _mlp_dims(net: MLP):
    return net.sizes[0], tuple(net.sizes[1:-1]), net.sizes[-1]


def gaussian_log_prob(a, mu, log_std) -> np.ndarray:
    z = (a - mu) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * a.shape[-1] * LOG_2PI


def gaussian_kl(mu0, ls0, mu1, ls1) -> np.ndarray:
    """KL(N0 || N1) per row for diagonal Gaussians."""
    var0 = np.exp(2.0 * ls0)
    var1 = np.exp(2.0 * ls1)
    return np.sum(ls1 - ls0 + (var0 + (mu0 - mu1) ** 2) / (2.0 * var1) - 0.5, axis=-1)
