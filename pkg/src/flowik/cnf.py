"""Conditional continuous normalizing flow over joint configurations.

Time runs from the latent (``t = 0``) to the joint configuration (``t = 1``).
``inverse`` returns ``logdet = int_0^1 Tr(dh/dz) dt`` so that

    log p(q | x) = log N(z; 0, I) - logdet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DynamicsConfig, DynamicsNet
from .odeint import (EXACT, INFER_SOLVER, TRAIN_SOLVER, Hutchinson, SolverConfig, SolverError,
                     integrate, integrate_adjoint, integrate_augmented, trace_probes)
from .dynamics import with_time

FORMAT_VERSION = 1
POSE_FEATURES = 7
LOG_2PI = float(np.log(2.0 * np.pi))


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class SignatureError(CheckpointError):
    """Checkpoint was trained for a different robot."""


class FlowError(RuntimeError):
    """Non-finite density during loss evaluation."""


@dataclass(frozen=True)
class RobotSignature:
    name: str
    dof: int
    n_targets: int
    spec_hash: str = ""

    @classmethod
    def of(cls, robot):
        return cls(robot.name, robot.dof, robot.n_targets, robot.signature_hash())

    def check(self, robot):
        other = RobotSignature.of(robot)
        if (self.dof, self.n_targets) != (other.dof, other.n_targets):
            raise SignatureError(
                f"checkpoint is for {self.name!r} (dof={self.dof}, targets={self.n_targets}); "
                f"robot {other.name!r} has dof={other.dof}, targets={other.n_targets}")
        if self.spec_hash and self.spec_hash != other.spec_hash:
            raise SignatureError(
                f"checkpoint robot hash {self.spec_hash} does not match {other.name!r} "
                f"({other.spec_hash})")


def pose_features(positions, quats):
    """Concatenate per-target ``[p; q]`` rows: ``(B, m, 3), (B, m, 4) -> (B, 7m)``."""
    positions = np.asarray(positions, dtype=float)
    quats = np.asarray(quats, dtype=float)
    return np.concatenate([positions, quats], axis=-1).reshape(positions.shape[0], -1)


@dataclass
class FlowModel:
    net: DynamicsNet
    signature: RobotSignature
    train_solver: SolverConfig = TRAIN_SOLVER
    infer_solver: SolverConfig = INFER_SOLVER
    # condition features are mapped to (x - cond_offset) * cond_scale
    cond_offset: np.ndarray = None
    cond_scale: np.ndarray = None
    train_state: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.net.config
        if cfg.state_dim != self.signature.dof:
            raise SignatureError(
                f"state_dim {cfg.state_dim} does not match robot dof {self.signature.dof}")
        if cfg.condition_dim != POSE_FEATURES * self.signature.n_targets:
            raise SignatureError(
                f"condition_dim {cfg.condition_dim} != 7 x {self.signature.n_targets} targets")
        c = cfg.condition_dim
        self.cond_offset = np.zeros(c) if self.cond_offset is None else np.asarray(self.cond_offset, float)
        self.cond_scale = np.ones(c) if self.cond_scale is None else np.asarray(self.cond_scale, float)

    @classmethod
    def create(cls, robot, hidden_widths=(64, 64, 64), activation="tanh", seed=0, **kwargs):
        cfg = DynamicsConfig(robot.dof, POSE_FEATURES * robot.n_targets, tuple(hidden_widths), activation)
        return cls(DynamicsNet.initialize(cfg, seed), RobotSignature.of(robot), **kwargs)

    @property
    def config(self):
        return self.net.config

    @property
    def dim(self):
        return self.net.config.state_dim

    @property
    def parameter_count(self):
        return self.net.parameter_count

    def condition(self, positions, quats):
        """Network condition from target poses ``(B, m, 3)`` / ``(B, m, 4)``."""
        return (pose_features(positions, quats) - self.cond_offset) * self.cond_scale

    def condition_from_poses(self, targets):
        """Same as :meth:`condition` for a list of Pose lists (one list per sample)."""
        pos = np.array([[p.position for p in row] for row in targets])
        quat = np.array([[p.orientation for p in row] for row in targets])
        if pos.ndim != 3 or pos.shape[1] != self.signature.n_targets:
            raise ValueError(f"each sample needs {self.signature.n_targets} target poses")
        return self.condition(pos, quat)


def _check_batch(model, x, cond):
    x = np.asarray(x, dtype=float)
    cond = np.asarray(cond, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"expected (B, {model.dim}) array, got {x.shape}")
    if cond.shape != (x.shape[0], model.config.condition_dim):
        raise ValueError(f"expected condition of shape ({x.shape[0]}, {model.config.condition_dim}), "
                         f"got {cond.shape}")
    return x, cond


def forward(model, z, cond, solver=None):
    """Latent ``z`` to joint configuration ``q`` (integrate 0 -> 1)."""
    z, cond = _check_batch(model, z, cond)
    net = model.net
    B, n = z.shape

    def field(t, y):
        return net(y.reshape(B, n), with_time(cond, t)).ravel()

    return integrate(field, z.ravel(), 0.0, 1.0, solver or model.infer_solver).reshape(B, n)


def inverse(model, q, cond, trace=EXACT, solver=None, rng=None):
    """Joint configuration to latent (integrate 1 -> 0); returns ``(z, logdet)``."""
    q, cond = _check_batch(model, q, cond)
    st = integrate_augmented(model.net, q, cond, 1.0, 0.0, trace, solver or model.infer_solver, rng)
    return st.z, st.logdet


def base_log_density(z):
    z = np.asarray(z, dtype=float)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def log_density(model, q, cond, trace=EXACT, solver=None, rng=None):
    """``log p(q | x)`` for every row."""
    z, logdet = inverse(model, q, cond, trace, solver, rng)
    return base_log_density(z) - logdet


def _raise_nonfinite(nll, t=None):
    bad = np.flatnonzero(~np.isfinite(nll))
    at = "" if t is None else f" at t={t:.6g}"
    raise FlowError(f"non-finite density for sample index {int(bad[0])}{at}")


def loss(model, q, cond, trace=EXACT, solver=None, rng=None):
    """Mean negative log-likelihood of a batch."""
    try:
        nll = -log_density(model, q, cond, trace, solver or model.train_solver, rng)
    except SolverError as exc:
        raise FlowError(f"solver failed during loss evaluation: {exc}") from exc
    if not np.all(np.isfinite(nll)):
        _raise_nonfinite(nll)
    return float(np.mean(nll))


def loss_and_grad(model, q, cond, trace=EXACT, solver=None, rng=None):
    """Mean NLL and its parameter gradient via the adjoint method."""
    q, cond = _check_batch(model, q, cond)
    solver = solver or model.train_solver
    B, n = q.shape
    probes = trace_probes(trace, B, n, rng)
    try:
        st = integrate_augmented(model.net, q, cond, 1.0, 0.0, probes, solver)
    except SolverError as exc:
        raise FlowError(f"solver failed during loss evaluation: {exc}") from exc
    nll = -(base_log_density(st.z) - st.logdet)
    if not np.all(np.isfinite(nll)):
        _raise_nonfinite(nll)
    # d(nll)/dz0 = z0, d(nll)/d(logdet) = 1, averaged over the batch
    _, grad = integrate_adjoint(model.net, st.z, st.z / B, np.full(B, 1.0 / B), cond,
                                1.0, 0.0, probes, solver)
    return float(np.mean(nll)), grad


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _to_jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def checkpoint_dict(model):
    cfg = model.config
    net = model.net
    weights = {k: v for k, v in net.unflatten(net.params).items()}
    return _to_jsonable({
        "format_version": FORMAT_VERSION,
        "dynamics": cfg.to_dict(),
        "train_solver": model.train_solver.to_dict(),
        "infer_solver": model.infer_solver.to_dict(),
        "robot": {"name": model.signature.name, "dof": model.signature.dof,
                  "n_targets": model.signature.n_targets, "spec_hash": model.signature.spec_hash},
        "condition_scaling": {"offset": model.cond_offset, "scale": model.cond_scale},
        "parameter_count": net.parameter_count,
        "weights": weights,
        "train_state": model.train_state,
    })


def dumps_checkpoint(model):
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(checkpoint_dict(model), sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(model, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_checkpoint(model))
    tmp.replace(path)


def model_from_checkpoint(doc, robot=None):
    try:
        version = doc["format_version"]
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        d = doc["dynamics"]
        cfg = DynamicsConfig(int(d["state_dim"]), int(d["condition_dim"]),
                             tuple(d["hidden_widths"]), d["activation"])
        r = doc["robot"]
        sig = RobotSignature(r["name"], int(r["dof"]), int(r["n_targets"]), r.get("spec_hash", ""))
        net = DynamicsNet(cfg)
        named = net.unflatten(net.params)
        weights = doc["weights"]
        if set(weights) != set(named):
            raise CheckpointError("weight names do not match the dynamics configuration")
        for k, view in named.items():
            arr = np.asarray(weights[k], dtype=float)
            if arr.shape != view.shape:
                raise CheckpointError(f"weight {k} has shape {arr.shape}, expected {view.shape}")
            view[...] = arr
        if int(doc.get("parameter_count", net.parameter_count)) != net.parameter_count:
            raise CheckpointError("parameter_count does not match the weight arrays")
        scaling = doc.get("condition_scaling", {})
        model = FlowModel(net, sig,
                          SolverConfig(**doc["train_solver"]), SolverConfig(**doc["infer_solver"]),
                          scaling.get("offset"), scaling.get("scale"),
                          doc.get("train_state", {}) or {})
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if robot is not None:
        sig.check(robot)
    return model


def load_checkpoint(path, robot=None):
    """Load a checkpoint; with ``robot`` given, verify it was trained for that robot."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    return model_from_checkpoint(doc, robot)
