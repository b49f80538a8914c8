import math

import numpy as np
import pytest
from scipy.linalg import expm

from flowik.dynamics import DynamicsConfig, DynamicsNet
from flowik.odeint import (EXACT, Hutchinson, SolverConfig, SolverError, integrate,
                           integrate_adjoint, integrate_augmented, trace_probes)

from conftest import random_net

DOPRI_TIGHT = SolverConfig("dopri5", rtol=1e-8, atol=1e-8)


def decay(t, y):
    return -y


# -- generic solvers -----------------------------------------------------------------

def test_exponential_decay_dopri5():
    y = integrate(decay, np.array([1.0]), 0.0, 1.0, DOPRI_TIGHT)
    assert abs(y[0] - math.exp(-1)) < 1e-7


def test_zero_field_is_exact():
    y0 = np.array([0.3, -2.0])
    for cfg in (SolverConfig("rk4", steps=7), DOPRI_TIGHT):
        np.testing.assert_array_equal(integrate(lambda t, y: np.zeros_like(y), y0, 0.0, 1.0, cfg), y0)


@pytest.mark.parametrize("cfg", [SolverConfig("rk4", steps=64), SolverConfig("dopri5", rtol=1e-9, atol=1e-9)])
def test_rotation_field(cfg):
    y = integrate(lambda t, y: np.array([-y[1], y[0]]), np.array([1.0, 0.0]), 0.0, math.pi / 2, cfg)
    np.testing.assert_allclose(y, [0.0, 1.0], atol=1e-6)


def test_rk4_fourth_order_convergence():
    errs = [abs(integrate(decay, np.array([1.0]), 0.0, 1.0, SolverConfig("rk4", steps=s))[0] - math.exp(-1))
            for s in (8, 16)]
    assert 12 <= errs[0] / errs[1] <= 20


@pytest.mark.parametrize("rtol", [1e-4, 1e-6, 1e-8])
def test_dopri5_respects_tolerance(rtol):
    cfg = SolverConfig("dopri5", rtol=rtol, atol=rtol)
    y = integrate(decay, np.array([1.0, 2.0]), 0.0, 2.0, cfg)
    exact = np.array([1.0, 2.0]) * math.exp(-2)
    assert np.all(np.abs(y - exact) <= 10 * (rtol * np.abs(exact) + rtol))
    # time-dependent field
    y = integrate(lambda t, y: np.cos(t) * y, np.array([1.0]), 0.0, 3.0, cfg)
    assert abs(y[0] - math.exp(math.sin(3.0))) <= 10 * (rtol * math.exp(math.sin(3.0)) + rtol)


@pytest.mark.parametrize("cfg", [SolverConfig("rk4", steps=32), DOPRI_TIGHT])
def test_backward_integration(cfg):
    y = integrate(decay, np.array([math.exp(-1)]), 1.0, 0.0, cfg)
    assert abs(y[0] - 1.0) < 1e-6


def test_solver_reports_failure_time():
    def blows_up(t, y):
        return y * np.inf if t > 0.5 else y

    with pytest.raises(SolverError) as info:
        integrate(blows_up, np.array([1.0]), 0.0, 1.0, SolverConfig("rk4", steps=10))
    assert info.value.t > 0.5
    with pytest.raises(SolverError, match="max_steps"):
        integrate(decay, np.array([1.0]), 0.0, 1.0, SolverConfig("dopri5", rtol=1e-12, atol=1e-12, max_steps=3))
    with pytest.raises(SolverError, match="max_steps"):
        integrate(decay, np.array([1.0]), 0.0, 1.0, SolverConfig("rk4", steps=10, max_steps=5))


@pytest.mark.parametrize("kwargs", [dict(method="euler"), dict(steps=0), dict(rtol=0.0), dict(atol=-1.0),
                                    dict(max_steps=0)])
def test_invalid_solver_config(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_dopri5_is_deterministic():
    f = lambda t, y: np.sin(3 * t) * y - y ** 3  # noqa: E731
    a = integrate(f, np.array([0.5, -1.2]), 0.0, 1.0, SolverConfig("dopri5"))
    b = integrate(f, np.array([0.5, -1.2]), 0.0, 1.0, SolverConfig("dopri5"))
    np.testing.assert_array_equal(a, b)


# -- trace probes ------------------------------------------------------------------------

def test_probe_modes():
    eps, w = trace_probes(EXACT, 2, 3)
    assert eps.shape == (2, 3, 3) and np.all(w == 1.0)
    eps, w = trace_probes(Hutchinson(4, seed=1), 5, 3)
    assert eps.shape == (5, 4, 3) and set(np.unique(eps)) == {-1.0, 1.0}
    np.testing.assert_allclose(w, 0.25)
    again, _ = trace_probes(Hutchinson(4, seed=1), 5, 3)
    np.testing.assert_array_equal(eps, again)
    explicit = (eps, w)
    assert trace_probes(explicit, 5, 3) is explicit
    with pytest.raises(ValueError):
        trace_probes("sometimes", 1, 1)


# -- flow systems --------------------------------------------------------------------------

def linear_field_net(A):
    n = A.shape[0]
    net = DynamicsNet(DynamicsConfig(n, 1, (n,), "identity"))
    named = net.unflatten(net.params)
    named["W0"][...] = A
    named["W_out"][...] = np.eye(n)
    return net


A3 = np.array([[-0.3, 0.8, 0.1], [-0.5, 0.2, 0.0], [0.2, -0.1, 0.4]])


def test_zero_net_augmented_is_identity():
    net = DynamicsNet(DynamicsConfig(3, 2, (8,)))
    z = np.random.default_rng(0).standard_normal((4, 3))
    st = integrate_augmented(net, z, np.zeros((4, 2)), 1.0, 0.0)
    np.testing.assert_array_equal(st.z, z)
    assert np.all(st.logdet == 0.0)


def test_linear_field_augmented_forward():
    net = linear_field_net(A3)
    z0 = np.random.default_rng(1).standard_normal((5, 3))
    st = integrate_augmented(net, z0, np.zeros((5, 1)), 0.0, 1.0, EXACT, SolverConfig("rk4", steps=64))
    np.testing.assert_allclose(st.z, z0 @ expm(A3).T, atol=1e-6)
    np.testing.assert_allclose(st.logdet, -np.trace(A3), atol=1e-6)


def test_hutchinson_trace_on_linear_field():
    net = linear_field_net(A3)
    B = 10_000
    z0 = np.zeros((B, 3))
    st = integrate_augmented(net, z0, np.zeros((B, 1)), 1.0, 0.0, Hutchinson(1, seed=3),
                             SolverConfig("rk4", steps=4))
    est = st.logdet
    assert abs(est.mean() - np.trace(A3)) < 3 * est.std(ddof=1) / math.sqrt(B)


def pipeline_loss(net, params, z1, cond, probes, c_z, c_ld, cfg):
    """``L = c_z . z(0) + c_ld . logdet`` through the whole backward solve."""
    st = integrate_augmented(DynamicsNet(net.config, params), z1, cond, 1.0, 0.0, probes, cfg)
    return np.sum(c_z * st.z) + np.sum(c_ld * st.logdet)


def adjoint_case(seed, n, widths=(8,)):
    rng = np.random.default_rng(seed)
    net = random_net(n, 2, widths, seed, scale=0.6)
    B = 2
    z1, cond = rng.standard_normal((B, n)), rng.standard_normal((B, 2))
    probes = trace_probes(EXACT if seed % 2 else Hutchinson(1, seed=seed), B, n)
    c_z, c_ld = rng.standard_normal((B, n)), rng.standard_normal(B)
    cfg = SolverConfig("rk4", steps=64)
    st = integrate_augmented(net, z1, cond, 1.0, 0.0, probes, cfg)
    g_z1, g_theta = integrate_adjoint(net, st.z, c_z, c_ld, cond, 1.0, 0.0, probes, cfg)
    loss = lambda params, z: pipeline_loss(net, params, z, cond, probes, c_z, c_ld, cfg)  # noqa: E731
    return net, z1, g_z1, g_theta, loss, rng


def test_adjoint_matches_finite_differences_for_every_parameter():
    net, z1, _, g_theta, loss, _ = adjoint_case(1, 3)
    h = 1e-6
    fd = np.empty(net.parameter_count)
    for i in range(net.parameter_count):
        e = np.zeros(net.parameter_count)
        e[i] = h
        fd[i] = (loss(net.params + e, z1) - loss(net.params - e, z1)) / (2 * h)
    assert np.max(np.abs(g_theta - fd)) / np.max(np.abs(fd)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_adjoint_directional_derivatives(seed):
    """Random small nets: the gradient agrees with differences along random directions."""
    n = 1 + seed % 6
    net, z1, g_z1, g_theta, loss, rng = adjoint_case(seed, n, (8,) if seed < 10 else (6, 6))
    h = 1e-6
    for _ in range(3):
        d = rng.standard_normal(net.parameter_count)
        fd = (loss(net.params + h * d, z1) - loss(net.params - h * d, z1)) / (2 * h)
        assert abs(g_theta @ d - fd) < 1e-4 * max(abs(fd), 1e-3 * np.linalg.norm(g_theta) * np.linalg.norm(d))
    d = rng.standard_normal(z1.shape)
    fd = (loss(net.params, z1 + h * d) - loss(net.params, z1 - h * d)) / (2 * h)
    assert abs(np.sum(g_z1 * d) - fd) < 1e-4 * max(abs(fd), 1e-3)


def test_adjoint_of_zero_net():
    net = DynamicsNet(DynamicsConfig(3, 1, (4,)))
    z = np.random.default_rng(0).standard_normal((3, 3))
    g_z, g_theta = integrate_adjoint(net, z, z, np.zeros(3), np.zeros((3, 1)), 1.0, 0.0)
    np.testing.assert_array_equal(g_z, z)
    # W_out sees the hidden activations, so only the output map can receive gradient
    named = net.unflatten(g_theta)
    for k in ("W0", "b0", "S0", "T0"):
        assert np.all(named[k] == 0.0)


def test_adjoint_is_linear_in_the_loss():
    net = random_net(3, 2, (6,), 4)
    rng = np.random.default_rng(4)
    z, cond = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    cz, cl = rng.standard_normal((3, 3)), rng.standard_normal(3)
    cfg = SolverConfig("rk4", steps=16)
    a = integrate_adjoint(net, z, cz, cl, cond, 1.0, 0.0, EXACT, cfg)
    b = integrate_adjoint(net, z, 2 * cz, 2 * cl, cond, 1.0, 0.0, EXACT, cfg)
    np.testing.assert_allclose(b[0], 2 * a[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b[1], 2 * a[1], rtol=0, atol=1e-12 * max(1, np.abs(a[1]).max()))


def test_adjoint_rejects_fresh_hutchinson_draws():
    net = random_net(2, 1, (4,), 0)
    with pytest.raises(ValueError):
        integrate_adjoint(net, np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1), np.zeros((1, 1)),
                          1.0, 0.0, Hutchinson(1))


def test_time_reversal_round_trip():
    rng = np.random.default_rng(2)
    cfg = SolverConfig("rk4", steps=32)
    for n in (2, 5, 8):
        net = random_net(n, 3, (16, 16), n, scale=0.3)
        z0, cond = rng.standard_normal((6, n)), rng.standard_normal((6, 3))
        fwd = integrate_augmented(net, z0, cond, 0.0, 1.0, EXACT, cfg)
        back = integrate_augmented(net, fwd.z, cond, 1.0, 0.0, EXACT, cfg)
        assert np.max(np.abs(back.z - z0)) < 1e-6
        np.testing.assert_allclose(back.logdet, -fwd.logdet, atol=1e-6)
