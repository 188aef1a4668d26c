"""Gaussian MLP policy with hand-written backpropagation.

All parameters live in one flat vector. Every routine that takes ``flat``
accepts either a single vector of shape ``(n,)`` or a stack ``(m, n)`` with
one parameter vector per state row, which is how perturbed policies are
evaluated side by side.

Flat layout: for each linear layer its weight (row-major, ``out x in``) then
its bias; then layer-norm gain and bias for each hidden layer; then the raw
log-std parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import quad_form

LOG_2PI = math.log(2.0 * math.pi)
LN_EPS = 1e-5


def _matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    # W: (..., out, in), x: (..., in); leading dims broadcast
    if W.ndim == 2:
        return x @ W.T
    return np.matmul(W, x[..., None])[..., 0]


def _rmatvec(W: np.ndarray, g: np.ndarray) -> np.ndarray:
    if W.ndim == 2:
        return g @ W
    return np.matmul(g[..., None, :], W)[..., 0, :]


class Mlp:
    """tanh MLP with optional layer normalization after each hidden linear map."""

    def __init__(self, sizes: Sequence[int], layer_norm: bool = True):
        self.sizes = tuple(int(s) for s in sizes)
        self.layer_norm = bool(layer_norm)
        self.n_layers = len(self.sizes) - 1
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        off = 0
        for l in range(self.n_layers):
            fan_in, fan_out = self.sizes[l], self.sizes[l + 1]
            off = self._add(f"W{l}", off, (fan_out, fan_in))
            off = self._add(f"b{l}", off, (fan_out,))
        if self.layer_norm:
            for l in range(self.n_layers - 1):
                off = self._add(f"g{l}", off, (self.sizes[l + 1],))
                off = self._add(f"c{l}", off, (self.sizes[l + 1],))
        self.size = off

    def _add(self, name: str, off: int, shape: tuple[int, ...]) -> int:
        count = int(np.prod(shape))
        self.layout[name] = (off, off + count, shape)
        return off + count

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        lo, hi, shape = self.layout[name]
        return flat[..., lo:hi].reshape(flat.shape[:-1] + shape)

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
        flat = np.zeros(self.size)
        for l in range(self.n_layers):
            fan_in = self.sizes[l]
            lim = math.sqrt(3.0 / fan_in)
            if l == self.n_layers - 1:
                lim *= out_scale
            lo, hi, _ = self.layout[f"W{l}"]
            flat[lo:hi] = rng.uniform(-lim, lim, size=hi - lo)
        if self.layer_norm:
            for l in range(self.n_layers - 1):
                lo, hi, _ = self.layout[f"g{l}"]
                flat[lo:hi] = 1.0
        return flat

    def forward(self, flat: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        h = x
        for l in range(self.n_layers):
            W = self.view(flat, f"W{l}")
            b = self.view(flat, f"b{l}")
            z = _matvec(W, h) + b
            if l == self.n_layers - 1:
                cache.append((h, None, None))
                return z, cache
            if self.layer_norm:
                mu = z.mean(axis=-1, keepdims=True)
                inv = 1.0 / np.sqrt(z.var(axis=-1, keepdims=True) + LN_EPS)
                u = (z - mu) * inv
                y = self.view(flat, f"g{l}") * u + self.view(flat, f"c{l}")
                ln = (u, inv)
            else:
                y, ln = z, None
            out = np.tanh(y)
            cache.append((h, ln, out))
            h = out
        raise AssertionError("unreachable")

    def backward(self, flat: np.ndarray, cache: list, dout: np.ndarray, per_sample: bool = True) -> np.ndarray:
        """Gradient of ``sum(dout * output)`` wrt the flat parameters.

        ``per_sample`` returns one gradient row per input row, otherwise the
        sum over rows.
        """
        m = dout.shape[0]
        grad = np.zeros((m, self.size)) if per_sample else np.zeros(self.size)

        def put(name: str, per_row: np.ndarray, summed=None):
            lo, hi, _ = self.layout[name]
            if per_sample:
                grad[:, lo:hi] = per_row.reshape(m, -1)
            else:
                grad[lo:hi] = (per_row.sum(axis=0) if summed is None else summed).ravel()

        delta = dout
        for l in range(self.n_layers - 1, -1, -1):
            h_in, ln, h_out = cache[l]
            if l < self.n_layers - 1:
                dy = delta * (1.0 - h_out * h_out)
                if self.layer_norm:
                    u, inv = ln
                    put(f"g{l}", dy * u)
                    put(f"c{l}", dy)
                    du = dy * self.view(flat, f"g{l}")
                    delta = inv * (du - du.mean(axis=-1, keepdims=True) - u * (du * u).mean(axis=-1, keepdims=True))
                else:
                    delta = dy
            if per_sample:
                put(f"W{l}", delta[:, :, None] * h_in[:, None, :])
            else:
                put(f"W{l}", None, summed=delta.T @ h_in)
            put(f"b{l}", delta)
            if l > 0:
                delta = _rmatvec(self.view(flat, f"W{l}"), delta)
        return grad


class GaussianMlpPolicy:
    """State-conditioned diagonal Gaussian with a state-independent, bounded log-std.

    The log-std is ``lo + (hi - lo) * sigmoid(raw)`` so it stays inside
    ``log_std_bounds`` for any raw value.
    """

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden: Sequence[int] = (32, 32),
        layer_norm: bool = True,
        log_std_bounds: tuple[float, float] = (-2.5, -0.5),
        init_log_std: float = -1.0,
        rng: np.random.Generator | None = None,
        flat: np.ndarray | None = None,
    ):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        if not self.log_std_bounds[0] < self.log_std_bounds[1]:
            raise ValueError("log_std_bounds must be increasing")
        self.mlp = Mlp((self.obs_dim, *self.hidden, self.act_dim), layer_norm=layer_norm)
        self.n_params = self.mlp.size + self.act_dim
        self.ls_slice = slice(self.mlp.size, self.n_params)
        if flat is not None:
            self._flat = np.zeros(self.n_params)
            self.set_flat(flat)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            lo, hi = self.log_std_bounds
            frac = min(max((init_log_std - lo) / (hi - lo), 1e-6), 1 - 1e-6)
            raw = math.log(frac / (1.0 - frac))
            self._flat = np.concatenate([self.mlp.init(rng, out_scale=0.01), np.full(self.act_dim, raw)])

    @property
    def layer_norm(self) -> bool:
        return self.mlp.layer_norm

    def get_flat(self) -> np.ndarray:
        return self._flat.copy()

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self._flat = flat.copy()

    def clone(self, flat: np.ndarray | None = None) -> "GaussianMlpPolicy":
        return GaussianMlpPolicy(
            self.obs_dim, self.act_dim, self.hidden, self.layer_norm, self.log_std_bounds,
            flat=self._flat if flat is None else flat,
        )

    def _params(self, flat):
        return self._flat if flat is None else np.asarray(flat, dtype=float)

    def log_std(self, flat: np.ndarray | None = None) -> np.ndarray:
        raw = self._params(flat)[..., self.ls_slice]
        lo, hi = self.log_std_bounds
        return lo + (hi - lo) / (1.0 + np.exp(-raw))

    def _log_std_slope(self, flat) -> np.ndarray:
        raw = self._params(flat)[..., self.ls_slice]
        s = 1.0 / (1.0 + np.exp(-raw))
        return (self.log_std_bounds[1] - self.log_std_bounds[0]) * s * (1.0 - s)

    def mean(self, states: np.ndarray, flat: np.ndarray | None = None) -> np.ndarray:
        mu, _ = self.mlp.forward(self._params(flat), np.asarray(states, dtype=float))
        return mu

    def act(self, state: np.ndarray, rng: np.random.Generator | None, flat: np.ndarray | None = None,
            noise: np.ndarray | None = None) -> np.ndarray:
        """Sample ``mean(state) + exp(log_std) * z`` with ``z ~ N(0, I)`` drawn from ``rng``.

        Passing ``noise`` fixes ``z`` instead of drawing it.
        """
        state = np.asarray(state, dtype=float)
        if state.shape[-1] != self.obs_dim:
            raise ValueError(f"state has dimension {state.shape[-1]}, policy expects {self.obs_dim}")
        mu = self.mean(state, flat)
        if noise is None:
            if rng is None:
                raise ValueError("act needs an rng unless noise is given")
            z = rng.standard_normal(mu.shape)
        else:
            z = np.broadcast_to(np.asarray(noise, dtype=float), mu.shape)
        a = mu + np.exp(self.log_std(flat)) * z
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("policy produced a non-finite action")
        return a

    def log_prob(self, states: np.ndarray, actions: np.ndarray, flat: np.ndarray | None = None) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if states.shape[-1] != self.obs_dim or actions.shape[-1] != self.act_dim:
            raise ValueError("state/action dimension mismatch")
        mu = self.mean(states, flat)
        ls = self.log_std(flat)
        z = (actions - mu) * np.exp(-ls)
        lp = np.sum(-0.5 * z * z - ls, axis=-1) - 0.5 * self.act_dim * LOG_2PI
        if not np.all(np.isfinite(lp)):
            raise FloatingPointError("non-finite log-probability")
        return lp

    def score(self, states: np.ndarray, actions: np.ndarray, flat: np.ndarray | None = None) -> np.ndarray:
        """Per-sample gradient of ``log_prob`` wrt the flat parameters, shape ``(m, n)``."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        p = self._params(flat)
        mu, cache = self.mlp.forward(p, states)
        ls = self.log_std(p)
        inv_var = np.exp(-2.0 * ls)
        diff = actions - mu
        d_mu = diff * inv_var
        d_ls = diff * diff * inv_var - 1.0
        out = np.empty((states.shape[0], self.n_params))
        out[:, : self.mlp.size] = self.mlp.backward(p, cache, d_mu, per_sample=True)
        out[:, self.ls_slice] = d_ls * self._log_std_slope(p)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite score")
        return out

    def fisher_rows(self, states: np.ndarray, flat: np.ndarray | None = None) -> tuple[np.ndarray, int]:
        """Rows ``R`` with ``R'R / m`` equal to the expected Fisher matrix at ``states``.

        Uses the closed form for a diagonal Gaussian: mean Jacobians scaled
        by ``1/sigma`` plus ``sqrt(2)`` times the log-std Jacobian.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        m = states.shape[0]
        p = self._params(flat)
        _, cache = self.mlp.forward(p, states)
        inv_std = np.exp(-self.log_std(p))
        rows = [np.zeros((m, self.n_params)) for _ in range(self.act_dim)]
        for j in range(self.act_dim):
            d = np.zeros((m, self.act_dim))
            d[:, j] = inv_std[..., j]
            rows[j][:, : self.mlp.size] = self.mlp.backward(p, cache, d, per_sample=True)
        ls_rows = np.zeros((self.act_dim, self.n_params))
        slope = self._log_std_slope(p)
        for j in range(self.act_dim):
            ls_rows[j, self.mlp.size + j] = math.sqrt(2.0 * m) * slope[j]
        return np.vstack(rows + [ls_rows]), m

    def fisher(
        self,
        states: np.ndarray,
        rng: np.random.Generator | None = None,
        damping: float = 0.0,
        kind: str = "empirical",
    ) -> "FisherOperator":
        """Fisher operator at the current parameters over ``states``.

        ``empirical`` resamples one action per state and uses score outer
        products; ``expected`` uses the closed-form Gaussian Fisher.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[0] == 0:
            raise ValueError("empty state batch")
        if kind == "expected":
            rows, m = self.fisher_rows(states)
            return FisherOperator(rows, count=m, damping=damping)
        if kind != "empirical":
            raise ValueError(f"unknown Fisher kind {kind!r}")
        if rng is None:
            raise ValueError("empirical Fisher needs an rng to resample actions")
        actions = self.act(states, rng)
        return FisherOperator(self.score(states, actions), damping=damping)

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "hidden": list(self.hidden),
            "layer_norm": self.layer_norm,
            "log_std_bounds": list(self.log_std_bounds),
            "params": [float(x) for x in self._flat],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMlpPolicy":
        return cls(
            d["obs_dim"], d["act_dim"], d["hidden"], d["layer_norm"], tuple(d["log_std_bounds"]),
            flat=np.array(d["params"], dtype=float),
        )


def save_policy(policy: GaussianMlpPolicy, path: str | Path) -> None:
    """JSON checkpoint; float repr round-trips bit-exactly."""
    Path(path).write_text(json.dumps(policy.to_dict()))


def load_policy(path: str | Path) -> GaussianMlpPolicy:
    return GaussianMlpPolicy.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FisherOperator:
    """Matrix-free ``v -> R'(R v) / count + damping * v``.

    ``rows`` holds score vectors (empirical Fisher) or whitened Jacobian rows
    (expected Fisher).
    """

    rows: np.ndarray
    count: int | None = None
    damping: float = 0.0

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if self.rows.shape[0] == 0:
            raise ValueError("Fisher estimate needs a nonempty batch")
        if self.count is None:
            self.count = self.rows.shape[0]
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def undamped(self, v: np.ndarray) -> np.ndarray:
        return self.rows.T @ (self.rows @ v) / self.count

    def matmat(self, V: np.ndarray, damped: bool = True) -> np.ndarray:
        """Apply the operator to every row of ``V`` at once."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        out = (V @ self.rows.T) @ self.rows / self.count
        if damped and self.damping:
            out = out + self.damping * V
        return out

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"vector of shape {v.shape} does not match operator dimension {self.dim}")
        out = self.undamped(v)
        if self.damping:
            out = out + self.damping * v
        return out

    def with_damping(self, damping: float) -> "FisherOperator":
        return FisherOperator(self.rows, self.count, damping)

    def dense(self) -> np.ndarray:
        return self.rows.T @ self.rows / self.count + self.damping * np.eye(self.dim)


def kl_quadratic(F, d: np.ndarray) -> float:
    """Second-order KL estimate ``0.5 d' F d``, never including damping."""
    d = np.asarray(d, dtype=float)
    op = F.undamped if isinstance(F, FisherOperator) else F
    if isinstance(F, FisherOperator) and d.shape != (F.dim,):
        raise ValueError("dimension mismatch")
    return 0.5 * quad_form(op, d)


def gaussian_kl(mu_a, log_std_a, mu_b, log_std_b) -> np.ndarray:
    """Closed-form KL(N_a || N_b) for diagonal Gaussians, summed over the last axis."""
    var_a = np.exp(2.0 * log_std_a)
    var_b = np.exp(2.0 * log_std_b)
    return np.sum(log_std_b - log_std_a + (var_a + (mu_a - mu_b) ** 2) / (2.0 * var_b) - 0.5, axis=-1)


def exact_gaussian_kl(
    policy: GaussianMlpPolicy, flat_a: np.ndarray, flat_b: np.ndarray, states: np.ndarray
) -> float:
    """Mean over ``states`` of KL(pi_a(.|s) || pi_b(.|s))."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("empty state batch")
    kl = gaussian_kl(
        policy.mean(states, flat_a), policy.log_std(flat_a), policy.mean(states, flat_b), policy.log_std(flat_b)
    )
    return float(np.mean(kl))
