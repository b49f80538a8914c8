"""Conditioned hidden dynamics ``h(z, cond)`` and its exact derivatives.

Every hidden layer computes ``act(W a + b) * (S c + 1) + T c`` where ``c`` is
the condition vector (pose features with time appended last). The output
layer is a plain linear map without bias.

All parameters live in one flat float64 vector; the per-layer matrices are
views into it, so optimizers and ODE accumulators can treat the parameter
set as a single array.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("tanh", "softplus", "identity")


@dataclass(frozen=True)
class DynamicsConfig:
    state_dim: int
    condition_dim: int
    hidden_widths: tuple = (64, 64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.condition_dim < 0:
            raise ValueError("condition_dim must be >= 0")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a nonempty list of positive integers")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def cond_width(self):
        """Length of the condition vector seen by the network (time included)."""
        return self.condition_dim + 1

    def param_shapes(self):
        shapes = []
        fan_in = self.state_dim
        for w in self.hidden_widths:
            shapes += [("W", (w, fan_in)), ("b", (w,)),
                       ("S", (w, self.cond_width)), ("T", (w, self.cond_width))]
            fan_in = w
        shapes.append(("W_out", (self.state_dim, fan_in)))
        return shapes

    def parameter_count(self):
        return int(sum(np.prod(s) for _, s in self.param_shapes()))

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


def closed_form_parameter_count(state_dim, condition_dim, hidden_widths):
    """Parameter count written out layer by layer (independent of ``param_shapes``)."""
    c = condition_dim + 1
    total, fan_in = 0, state_dim
    for w in hidden_widths:
        total += w * fan_in + w + 2 * w * c
        fan_in = w
    return total + state_dim * fan_in


def _act(name, x, second=True):
    """Activation value with its first and (optionally) second derivatives."""
    if name == "tanh":
        y = np.tanh(x)
        d1 = 1.0 - y * y
        return y, d1, -2.0 * y * d1 if second else None
    if name == "softplus":
        s = expit(x)
        return np.logaddexp(0.0, x), s, s * (1.0 - s) if second else None
    return x, np.ones_like(x), np.zeros_like(x) if second else None


class DynamicsNet:
    """MLP with affine (scale and shift) conditioning on every hidden layer."""

    def __init__(self, config, params=None):
        self.config = config
        n = config.parameter_count()
        self.params = np.zeros(n) if params is None else np.array(params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {self.params.shape}")
        self.layers, self.W_out = self._views(self.params)

    def _views(self, flat):
        layers, pos = [], 0
        fan_in = self.config.state_dim
        c = self.config.cond_width
        for w in self.config.hidden_widths:
            W = flat[pos:pos + w * fan_in].reshape(w, fan_in)
            pos += w * fan_in
            b = flat[pos:pos + w]
            pos += w
            # S and T are adjacent, so one (2w, c) view serves both
            ST = flat[pos:pos + 2 * w * c].reshape(2 * w, c)
            pos += 2 * w * c
            layers.append((W, b, ST[:w], ST[w:], ST))
            fan_in = w
        return layers, flat[pos:].reshape(self.config.state_dim, fan_in)

    def unflatten(self, flat):
        """Named views into a parameter-shaped flat array (e.g. a gradient)."""
        layers, W_out = self._views(np.asarray(flat))
        named = {}
        for k, (W, b, S, T, _) in enumerate(layers):
            named.update({f"W{k}": W, f"b{k}": b, f"S{k}": S, f"T{k}": T})
        named["W_out"] = W_out
        return named

    @classmethod
    def initialize(cls, config, seed=0):
        """Hidden weights ~ N(0, 1/fan_in); everything else zero (identity flow)."""
        net = cls(config)
        rng = np.random.default_rng(seed)
        for W, *_ in net.layers:
            W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[1])
        return net

    @property
    def parameter_count(self):
        return self.params.size

    def copy(self):
        return DynamicsNet(self.config, self.params.copy())

    # ------------------------------------------------------------------

    def _check(self, z, cond):
        z = np.asarray(z, dtype=float)
        cond = np.asarray(cond, dtype=float)
        if z.ndim != 2 or z.shape[1] != self.config.state_dim:
            raise ValueError(f"state has shape {z.shape}, expected (B, {self.config.state_dim})")
        if cond.ndim != 2 or cond.shape != (z.shape[0], self.config.cond_width):
            raise ValueError(
                f"condition has shape {cond.shape}, expected ({z.shape[0]}, {self.config.cond_width})")
        return z, cond

    def _forward(self, z, cond, tangents=None, second=False):
        # Rows [0, B) carry the primal state; tangent rows follow probe-major,
        # so each layer needs a single product with W for both.
        B = z.shape[0]
        P = 0 if tangents is None else tangents.shape[1]
        if P:
            X = np.concatenate([z, np.swapaxes(tangents, 0, 1).reshape(P * B, -1)])
        else:
            X = z
        act_name = self.config.activation
        cache = []
        for W, b, _, _, ST in self.layers:
            w = W.shape[0]
            pre = X @ W.T
            pre[:B] += b
            y, d1, d2 = _act(act_name, pre[:B], second)
            gs = cond @ ST.T
            g = gs[:, :w] + 1.0
            out = np.empty_like(pre)
            np.multiply(y, g, out=out[:B])
            out[:B] += gs[:, w:]
            dpre = dact = None
            if P:
                dpre = pre[B:].reshape(P, B, w)
                dact = dpre * d1
                np.multiply(dact, g, out=out[B:].reshape(P, B, w))
            cache.append((X, y, d1, d2, g, dpre, dact))
            X = out
        H = X @ self.W_out.T
        dh = H[B:].reshape(P, B, -1) if P else None
        return H[:B], dh, cache, X

    def __call__(self, z, cond):
        """``dz/dt`` for a batch: ``z`` is ``(B, n)``, ``cond`` is ``(B, c + 1)``."""
        z, cond = self._check(z, cond)
        return self._forward(z, cond)[0]

    def jvp_state(self, z, cond, tangents):
        """Forward-mode products ``J @ e`` for tangents of shape ``(B, P, n)``."""
        z, cond = self._check(z, cond)
        return np.swapaxes(self._forward(z, cond, np.asarray(tangents, dtype=float))[1], 0, 1)

    def divergence(self, z, cond, probes, weights):
        """Weighted trace estimate ``sum_p w_p e_p^T J e_p`` together with ``h``.

        With unit-vector probes and unit weights this is the exact trace;
        with Rademacher probes and weights ``1/P`` it is Hutchinson's estimate.
        """
        z, cond = self._check(z, cond)
        h, dh, *_ = self._forward(z, cond, probes)
        return h, _probe_dot(probes, dh, weights)

    def vjp(self, z, cond, v, beta=None, probes=None, weights=None, want_params=True):
        """Reverse-mode gradient of ``sum_b v_b . h_b + beta_b * div_b``.

        ``div_b`` is the probe-weighted trace from :meth:`divergence`; it is
        left out when ``beta`` is None. Returns ``(h, div, grad_z, grad_params)``
        where ``grad_params`` is summed over the batch and ``div`` is None
        without probes.
        """
        z, cond = self._check(z, cond)
        v = np.asarray(v, dtype=float)
        B = z.shape[0]
        with_trace = beta is not None
        h, dh, cache, X_last = self._forward(z, cond, probes if with_trace else None, with_trace)
        grads = np.zeros_like(self.params) if want_params else None
        g_layers, g_out = self._views(grads) if want_params else (None, None)

        if with_trace:
            P = probes.shape[1]
            weights = np.asarray(weights, dtype=float)
            div = _probe_dot(probes, dh, weights)
            # d(beta . div)/d(dh[p, b]) = beta_b * w_p * e_{b,p}
            eps_bar = np.swapaxes(probes, 0, 1) * (np.asarray(beta, dtype=float)[None, :, None]
                                                   * weights[:, None, None])
            X_bar = np.concatenate([v, eps_bar.reshape(P * B, -1)])
        else:
            P, div, X_bar = 0, None, v
        if want_params:
            g_out += X_bar.T @ X_last
        A = X_bar @ self.W_out

        for k in range(len(self.layers) - 1, -1, -1):
            W = self.layers[k][0]
            X_prev, y, d1, d2, g, dpre, dact = cache[k]
            w = W.shape[0]
            a_bar = A[:B]
            pre_bar = np.empty_like(A)
            g_bar = a_bar * y
            np.multiply(a_bar * g, d1, out=pre_bar[:B])
            if P:
                da_bar = A[B:].reshape(P, B, w)
                g_bar += _psum(da_bar * dact)
                dact_bar = da_bar * g
                pre_bar[:B] += _psum(dact_bar * dpre) * d2
                np.multiply(dact_bar, d1, out=pre_bar[B:].reshape(P, B, w))
            if want_params:
                gW, gb, _, _, gST = g_layers[k]
                gW += pre_bar.T @ X_prev
                gb += pre_bar[:B].sum(axis=0)
                gST += np.concatenate([g_bar, a_bar], axis=1).T @ cond
            A = pre_bar @ W
        return h, div, A[:B], grads

    def vjp_state(self, z, cond, v):
        """``v^T dh/dz`` for every batch row."""
        return self.vjp(z, cond, v, want_params=False)[2]

    def vjp_params(self, z, cond, v):
        """``v^T dh/dtheta`` summed over the batch, as a flat parameter-shaped array."""
        return self.vjp(z, cond, v)[3]


def _psum(x):
    return x[0] if x.shape[0] == 1 else x.sum(axis=0)


def _probe_dot(probes, dh, weights):
    """``sum_p w_p e_{b,p} . dh[p, b]`` with probes ``(B, P, n)`` and ``dh`` ``(P, B, n)``."""
    return np.asarray(weights, dtype=float) @ (np.swapaxes(probes, 0, 1) * dh).sum(axis=2)


def with_time(cond, t):
    """Append the scalar time as the last condition column."""
    cond = np.asarray(cond, dtype=float)
    return np.concatenate([cond, np.full((cond.shape[0], 1), float(t))], axis=1)
