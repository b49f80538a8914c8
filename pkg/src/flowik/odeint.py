"""ODE integration for the flow: fixed-step RK4 and adaptive Dormand-Prince 5(4).

The flow-specific systems live here as well:

* :func:`integrate_augmented` carries ``(z, logdet)`` with
  ``d logdet / dt = -Tr(dh/dz)``;
* :func:`integrate_adjoint` runs the adjoint system backwards, rebuilding
  ``z`` on the way instead of storing a trajectory.

Time may run in either direction; ``t1 < t0`` simply gives negative steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import with_time

METHODS = ("rk4", "dopri5")


class SolverError(RuntimeError):
    """Integration failed; ``t`` is the time at which it happened."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    steps: int = 32
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self):
        return asdict(self)


TRAIN_SOLVER = SolverConfig("rk4", steps=32)
INFER_SOLVER = SolverConfig("dopri5", rtol=1e-5, atol=1e-5)


def _eval(field, t, y):
    dy = field(t, y)
    if not np.all(np.isfinite(dy)):
        raise SolverError("non-finite vector field", t)
    return dy


def _rk4(field, y, t0, t1, steps):
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = _eval(field, t, y)
        k2 = _eval(field, t + 0.5 * h, y + 0.5 * h * k1)
        k3 = _eval(field, t + 0.5 * h, y + 0.5 * h * k2)
        k4 = _eval(field, t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _rms_norm(x, scale):
    return float(np.sqrt(np.mean((x / scale) ** 2)))


def _initial_step(field, t0, y0, f0, direction, rtol, atol, span):
    # Hairer, Norsett & Wanner, "Solving ODEs I", II.4
    scale = atol + rtol * np.abs(y0)
    d0 = _rms_norm(y0, scale)
    d1 = _rms_norm(f0, scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = _eval(field, t0 + direction * h0, y0 + direction * h0 * f0)
    d2 = _rms_norm(f1 - f0, scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def _dopri5(field, y, t0, t1, cfg):
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    f = _eval(field, t, y)
    h = _initial_step(field, t0, y, f, direction, cfg.rtol, cfg.atol, span)
    safety, fac_min, fac_max, beta = 0.9, 0.2, 10.0, 0.04
    expo = 0.2 - 0.75 * beta
    err_old = 1e-4
    for _ in range(cfg.max_steps):
        remaining = abs(t1 - t)
        if remaining <= 1e-14 * max(1.0, abs(t1)):
            return y
        last = h >= remaining
        if last:
            h = remaining
        hs = direction * h
        k = [f]
        for i in range(1, 7):
            yi = y + hs * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
            k.append(_eval(field, t + _C[i] * hs, yi))
        y_new = yi  # row 7 of the tableau is the 5th-order solution (FSAL)
        err_vec = hs * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms_norm(err_vec, scale)
        if not np.isfinite(err):
            raise SolverError("non-finite error estimate", t)
        if err <= 1.0:
            fac = err ** expo / err_old ** beta if err > 0 else 0.0
            fac = min(1.0 / fac_min, max(1.0 / fac_max, fac / safety)) if fac > 0 else 1.0 / fac_max
            t = t1 if last else t + hs
            y, f = y_new, k[6]
            err_old = max(err, 1e-4)
            h = h / fac
        else:
            h = h / min(1.0 / fac_min, err ** expo / safety)
        if h < 1e-14 * max(1.0, abs(t)):
            raise SolverError("step size underflow", t)
    raise SolverError(f"exceeded max_steps={cfg.max_steps}", t)


def integrate(field, y0, t0, t1, cfg=TRAIN_SOLVER):
    """Solve ``dy/dt = field(t, y)`` from ``t0`` to ``t1`` and return ``y(t1)``.

    ``y0`` may be any float array; the field must return the same shape.
    """
    y = np.array(y0, dtype=float)
    if t0 == t1:
        return y
    if cfg.method == "rk4":
        if cfg.steps > cfg.max_steps:
            raise SolverError(f"exceeded max_steps={cfg.max_steps}", t0)
        return _rk4(field, y, float(t0), float(t1), cfg.steps)
    return _dopri5(field, y, float(t0), float(t1), cfg)


# ---------------------------------------------------------------------------
# trace estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hutchinson:
    """Rademacher trace probes, drawn once per sample and kept along its trajectory."""

    probes: int = 1
    seed: int | None = None

    def draw(self, batch, dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        eps = rng.integers(0, 2, size=(batch, self.probes, dim)).astype(float) * 2.0 - 1.0
        return eps, np.full(self.probes, 1.0 / self.probes)


EXACT = "exact"


def trace_probes(trace, batch, dim, rng=None):
    """Probe vectors ``(B, P, n)`` and weights ``(P,)`` for a trace mode.

    ``trace`` is ``"exact"`` (unit vectors), a :class:`Hutchinson`, or an
    explicit ``(probes, weights)`` pair which is passed through.
    """
    if isinstance(trace, tuple):
        return trace
    if trace == EXACT:
        return np.broadcast_to(np.eye(dim), (batch, dim, dim)), np.ones(dim)
    if isinstance(trace, Hutchinson):
        return trace.draw(batch, dim, rng)
    raise ValueError(f"unknown trace mode {trace!r}")


# ---------------------------------------------------------------------------
# flow systems
# ---------------------------------------------------------------------------

@dataclass
class AugmentedState:
    z: np.ndarray
    logdet: np.ndarray


def integrate_augmented(net, z, cond, t0, t1, trace=EXACT, cfg=TRAIN_SOLVER, rng=None):
    """Integrate ``z`` and the log-determinant term from ``t0`` to ``t1``.

    ``cond`` holds the per-sample condition without time, shape ``(B, c)``.
    Integrating 1 -> 0 (data to latent) yields ``logdet = +int_0^1 Tr dt``;
    0 -> 1 yields its negative.
    """
    z = np.asarray(z, dtype=float)
    B, n = z.shape
    probes, weights = trace_probes(trace, B, n, rng)

    def field(t, y):
        h, div = net.divergence(y[:B * n].reshape(B, n), with_time(cond, t), probes, weights)
        return np.concatenate([h.ravel(), -div])

    y = integrate(field, np.concatenate([z.ravel(), np.zeros(B)]), t0, t1, cfg)
    return AugmentedState(y[:B * n].reshape(B, n), y[B * n:])


def integrate_adjoint(net, z_end, grad_z_end, grad_logdet, cond, t_start, t_end,
                      trace=EXACT, cfg=TRAIN_SOLVER):
    """Gradients of a loss on the output of :func:`integrate_augmented`.

    The forward solve went ``t_start -> t_end`` and produced ``z_end`` and a
    logdet; the loss gradients with respect to those are ``grad_z_end``
    ``(B, n)`` and ``grad_logdet`` ``(B,)``. Here the adjoint ``a(t)`` and the
    parameter integral run ``t_end -> t_start`` while ``z`` is reconstructed
    alongside.

    Returns ``(grad_z_start, grad_params)``. ``trace`` must carry the same
    probes as the forward solve (pass an explicit ``(probes, weights)`` pair
    for Hutchinson).
    """
    z_end = np.asarray(z_end, dtype=float)
    B, n = z_end.shape
    P = net.params.size
    probes, weights = trace_probes(trace, B, n)
    if isinstance(trace, Hutchinson):
        raise ValueError("pass the probes used in the forward solve, not a fresh Hutchinson draw")
    # logdet obeys d/dt = -div, so its adjoint enters the combined scalar with weight -a_logdet
    beta = -np.asarray(grad_logdet, dtype=float) * np.ones(B)

    def field(t, y):
        zt = y[:B * n].reshape(B, n)
        at = y[B * n:2 * B * n].reshape(B, n)
        h, _, gz, gp = net.vjp(zt, with_time(cond, t), at, beta, probes, weights)
        return np.concatenate([h.ravel(), -gz.ravel(), -gp])

    y0 = np.concatenate([z_end.ravel(), np.asarray(grad_z_end, dtype=float).ravel(), np.zeros(P)])
    y = integrate(field, y0, t_end, t_start, cfg)
    return y[B * n:2 * B * n].reshape(B, n), y[2 * B * n:]
