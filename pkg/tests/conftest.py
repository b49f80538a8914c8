import numpy as np
import pytest

from flowik import cnf
from flowik.dynamics import DynamicsConfig, DynamicsNet
from flowik.kinematics import load_robot


@pytest.fixture(scope="session")
def planar2r():
    return load_robot("planar2r")


@pytest.fixture(scope="session")
def planar3r():
    return load_robot("planar3r")


@pytest.fixture(scope="session")
def spatial6r():
    return load_robot("spatial6r")


@pytest.fixture(scope="session")
def dualbranch():
    return load_robot("dualbranch7")


def random_net(n, c, widths, seed, scale=0.5, activation="tanh"):
    """Dynamics net with every parameter drawn at ``scale`` (no identity init)."""
    cfg = DynamicsConfig(n, c, widths, activation)
    rng = np.random.default_rng(seed)
    return DynamicsNet(cfg, scale * rng.standard_normal(cfg.parameter_count()))


def random_flow(robot, widths=(8, 8), seed=0, scale=0.3, **kw):
    model = cnf.FlowModel.create(robot, widths, seed=seed, **kw)
    rng = np.random.default_rng(seed + 1000)
    model.net.params[:] = scale * rng.standard_normal(model.parameter_count)
    return model


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
