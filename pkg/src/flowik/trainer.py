"""Online maximum-likelihood training of the flow.

Every step draws a fresh batch ``q ~ U(lower, upper)``, runs forward
kinematics to get the conditioning poses, and descends the mean negative
log-likelihood with adjoint gradients and Adam. The randomness of step ``k``
is derived from ``(seed, k)`` alone, which makes resumed runs identical to
uninterrupted ones.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cnf
from .iksolver import latent_draws, solve_targets
from .kinematics import load_robot, sample_joints
from .odeint import EXACT, Hutchinson, SolverConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "samples", "loss", "pos_err_mean", "pos_err_p95",
                  "ori_err_mean", "ori_err_p95", "wall_s"]
MAX_CONSECUTIVE_SKIPS = 3


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 1000
    learning_rate: float = 1e-3
    final_lr_ratio: float = 0.1
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 10.0
    eval_every: int = 100
    checkpoint_every: int = 0
    rng_seed: int = 0
    trace: str = "hutchinson"
    hutchinson_probes: int = 1
    eval_targets: int = 100
    eval_samples: int = 50
    # model construction (ignored on resume)
    hidden_widths: tuple = (64, 64, 64)
    activation: str = "tanh"
    train_solver: dict = field(default_factory=lambda: {"method": "rk4", "steps": 32})
    infer_solver: dict = field(default_factory=lambda: {"method": "dopri5", "rtol": 1e-5, "atol": 1e-5})

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ValueError("adam_betas must be two values in [0, 1)")
        if self.trace not in ("exact", "hutchinson"):
            raise ValueError(f"trace must be 'exact' or 'hutchinson', not {self.trace!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        SolverConfig(**self.train_solver)
        SolverConfig(**self.infer_solver)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    def lr_at(self, iteration):
        """Cosine decay from ``learning_rate`` to ``learning_rate * final_lr_ratio``."""
        lo = self.learning_rate * self.final_lr_ratio
        if self.iterations <= 1:
            return self.learning_rate
        frac = min(iteration / (self.iterations - 1), 1.0)
        return lo + 0.5 * (self.learning_rate - lo) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, size, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad, lr):
        """In-place update of ``params``."""
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        m_hat = self.m / (1.0 - self.b1 ** self.t)
        v_hat = self.v / (1.0 - self.b2 ** self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    def load_state_dict(self, d):
        self.t = int(d["t"])
        self.m = np.asarray(d["m"], dtype=float)
        self.v = np.asarray(d["v"], dtype=float)


def clip_global_norm(grad, max_norm):
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def step_rng(seed, iteration):
    return np.random.default_rng([int(seed), int(iteration)])


def training_batch(robot, model, batch_size, rng):
    """Fresh ``(q, cond)`` pairs: uniform joints and their forward kinematics."""
    q = sample_joints(robot, batch_size, rng)
    pos, quat = robot.fk_batch(q)
    return q, model.condition(pos, quat)


@dataclass
class EvalResult:
    pos_err_mean: float
    pos_err_p95: float
    ori_err_mean: float
    ori_err_p95: float
    failures: int
    pos_err: np.ndarray = field(repr=False)   # (targets, samples, m), nan where failed
    ori_err: np.ndarray = field(repr=False)
    q_pred: np.ndarray = field(repr=False)    # (targets, samples, n)
    q_true: np.ndarray = field(repr=False)    # (targets, n) joint draw behind each target


def evaluation_targets(robot, n_targets, seed):
    """Reachable targets: FK of uniform joint draws. Returns ``(q_true, pos, quat)``."""
    q_true = sample_joints(robot, n_targets, np.random.default_rng([seed, 1]))
    pos, quat = robot.fk_batch(q_true)
    return q_true, pos, quat


def evaluate(model, robot, n_targets=100, n_samples=50, seed=0, solver=None):
    """Sample reachable targets, solve each with fresh latents, and measure pose errors.

    Targets come from ``evaluation_targets(robot, n_targets, seed)`` and
    latents from ``latent_draws(seed, ...)``. A solver failure only removes
    that target's samples (counted in ``failures``).
    """
    q_true, pos, quat = evaluation_targets(robot, n_targets, seed)
    z = latent_draws(seed, n_targets, n_samples, robot.dof)
    q_pred, pe, oe, failed = solve_targets(model, robot, pos, quat, z, solver)
    ok_p, ok_o = pe[np.isfinite(pe)], oe[np.isfinite(oe)]

    def stat(x, f):
        return float(f(x)) if x.size else float("nan")

    return EvalResult(stat(ok_p, np.mean), stat(ok_p, lambda a: np.percentile(a, 95)),
                      stat(ok_o, np.mean), stat(ok_o, lambda a: np.percentile(a, 95)),
                      len(failed) * n_samples, pe, oe, q_pred, q_true)


class Trainer:
    """Owns the mutable model copy, optimizer state and counters of one run."""

    def __init__(self, model, robot, cfg):
        model.signature.check(robot)
        self.model = model
        self.robot = robot
        self.cfg = cfg
        self.opt = Adam(model.parameter_count, cfg.adam_betas, cfg.adam_eps)
        self.iteration = 0
        self.samples_seen = 0
        self.skipped = 0
        self._consecutive_skips = 0
        state = model.train_state
        if state:
            self.iteration = int(state.get("iteration", 0))
            self.samples_seen = int(state.get("samples_seen", 0))
            self.skipped = int(state.get("skipped", 0))
            if "optimizer" in state:
                self.opt.load_state_dict(state["optimizer"])

    def _trace(self):
        if self.cfg.trace == "exact":
            return EXACT
        return Hutchinson(self.cfg.hutchinson_probes)

    def step(self):
        """One online step; returns the batch loss (nan if the step was skipped)."""
        cfg = self.cfg
        rng = step_rng(cfg.rng_seed, self.iteration)
        q, cond = training_batch(self.robot, self.model, cfg.batch_size, rng)
        try:
            value, grad = cnf.loss_and_grad(self.model, q, cond, self._trace(), rng=rng)
            if not np.all(np.isfinite(grad)):
                raise cnf.FlowError("non-finite gradient")
        except cnf.FlowError as exc:
            self.skipped += 1
            self._consecutive_skips += 1
            log.warning("iteration %d skipped: %s", self.iteration, exc)
            if self._consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise TrainingAborted(
                    f"{MAX_CONSECUTIVE_SKIPS} consecutive skipped steps, last at iteration "
                    f"{self.iteration}: {exc}") from exc
            self.iteration += 1
            return float("nan")
        self._consecutive_skips = 0
        grad = clip_global_norm(grad, cfg.grad_clip_norm)
        self.opt.step(self.model.net.params, grad, cfg.lr_at(self.iteration))
        self.iteration += 1
        self.samples_seen += cfg.batch_size
        return value

    def snapshot_state(self):
        self.model.train_state = {
            "iteration": self.iteration,
            "samples_seen": self.samples_seen,
            "skipped": self.skipped,
            "optimizer": self.opt.state_dict(),
            "config": self.cfg.to_dict(),
        }

    def evaluate(self):
        # distinct from any training step's stream
        return evaluate(self.model, self.robot, self.cfg.eval_targets, self.cfg.eval_samples,
                        seed=self.cfg.rng_seed + 7919)


def train_step(model, robot, cfg, iteration=0, optimizer=None):
    """Single update of ``model`` in place; returns ``(loss, optimizer)``."""
    tr = Trainer(model, robot, cfg)
    tr.iteration = iteration
    if optimizer is not None:
        tr.opt = optimizer
    value = tr.step()
    return value, tr.opt


def metrics_path_for(out_path):
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".metrics.csv")


def train_loop(robot_path, cfg, out_path, resume_path=None, progress=None):
    """Train from scratch or resume, writing the checkpoint and a metrics CSV.

    Returns the final model. The metrics log sits beside ``out_path`` as
    ``<stem>.metrics.csv`` with one row per ``eval_every`` boundary.
    """
    robot = load_robot(robot_path) if not hasattr(robot_path, "fk_batch") else robot_path
    if resume_path is not None:
        model = cnf.load_checkpoint(resume_path, robot)
    else:
        model = cnf.FlowModel.create(
            robot, cfg.hidden_widths, cfg.activation, seed=cfg.rng_seed,
            train_solver=SolverConfig(**cfg.train_solver),
            infer_solver=SolverConfig(**cfg.infer_solver))
    trainer = Trainer(model, robot, cfg)
    metrics_path = metrics_path_for(out_path)
    resume_metrics = resume_path is not None and metrics_path_for(resume_path).exists()
    if resume_metrics and metrics_path_for(resume_path) != metrics_path:
        metrics_path.write_text(metrics_path_for(resume_path).read_text())
    if not resume_metrics:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    start = time.perf_counter()
    losses = []
    while trainer.iteration < cfg.iterations:
        value = trainer.step()
        if np.isfinite(value):
            losses.append(value)
        it = trainer.iteration
        if it % cfg.eval_every == 0:
            ev = trainer.evaluate()
            row = [it, trainer.samples_seen, _fmt(np.mean(losses) if losses else float("nan")),
                   _fmt(ev.pos_err_mean), _fmt(ev.pos_err_p95),
                   _fmt(ev.ori_err_mean), _fmt(ev.ori_err_p95),
                   f"{time.perf_counter() - start:.3f}"]
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)
            if progress:
                progress(dict(zip(METRICS_HEADER, row)))
            losses = []
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it < cfg.iterations:
            trainer.snapshot_state()
            cnf.save_checkpoint(trainer.model, out_path)
    trainer.snapshot_state()
    cnf.save_checkpoint(trainer.model, out_path)
    return trainer.model


def _fmt(x):
    return repr(float(x))


def read_metrics(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
