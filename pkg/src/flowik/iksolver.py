"""Batch IK with the flow, Cartesian path generation, and a damped least-squares baseline."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import cnf
from .kinematics import (Pose, canonicalize_quat, orientation_error, position_error, quat_conj,
                         quat_log, quat_mul, sample_joints)
from .odeint import SolverError

log = logging.getLogger(__name__)

DEFAULT_STEP_THRESHOLD = 0.25
POSE_COLUMNS = ["px", "py", "pz", "qw", "qx", "qy", "qz"]


class TargetFileError(ValueError):
    pass


@dataclass
class BatchResult:
    q: np.ndarray           # (k, n); nan rows for failures
    pos_err: np.ndarray     # (k, m)
    ori_err: np.ndarray     # (k, m)
    failures: list = field(default_factory=list)

    def __len__(self):
        return self.q.shape[0]


@dataclass
class PathReport:
    result: BatchResult
    continuous: bool
    break_index: int | None    # first waypoint whose joint step exceeds the threshold
    max_joint_step: float
    within_limits: bool
    step_threshold: float
    latent: np.ndarray = None
    attempt: int = 0

    def summary(self):
        pe = self.result.pos_err[np.isfinite(self.result.pos_err)]
        oe = self.result.ori_err[np.isfinite(self.result.ori_err)]

        def stats(x, unit):
            if not x.size:
                return {}
            return {f"mean_{unit}": float(np.mean(x)), f"p95_{unit}": float(np.percentile(x, 95)),
                    f"max_{unit}": float(np.max(x))}

        return {
            "continuity": "continuous" if self.continuous else "discontinuous",
            "break_index": self.break_index,
            "max_joint_step": self.max_joint_step,
            "step_threshold": self.step_threshold,
            "within_limits": self.within_limits,
            "waypoints": len(self.result),
            "failures": list(self.result.failures),
            "attempt": self.attempt,
            "latent": None if self.latent is None else [float(v) for v in self.latent],
            "position_error": stats(pe * 1000.0, "mm"),
            "orientation_error": stats(np.degrees(oe), "deg"),
        }


def _as_target_arrays(targets, m):
    """Accept ``(pos, quat)`` arrays or a list of Pose lists; return ``(k, m, 3)``, ``(k, m, 4)``."""
    if isinstance(targets, tuple) and len(targets) == 2 and not isinstance(targets[0], Pose):
        pos, quat = (np.asarray(a, dtype=float) for a in targets)
    else:
        pos = np.array([[p.position for p in row] for row in targets], dtype=float)
        quat = np.array([[p.orientation for p in row] for row in targets], dtype=float)
    if pos.ndim != 3 or pos.shape[1:] != (m, 3) or quat.shape != pos.shape[:2] + (4,):
        raise ValueError(f"targets must be (k, {m}, 3) positions and (k, {m}, 4) quaternions")
    return pos, canonicalize_quat(quat)


def make_latents(k, n, latents=None, seed=None):
    """Latents for ``k`` entries: sampled from ``seed``, provided ``(k, n)``, or shared ``(n,)``."""
    if latents is None:
        return np.random.default_rng(seed).standard_normal((k, n))
    z = np.asarray(latents, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != n or z.shape[0] not in (1, k):
        raise ValueError(f"latents must have shape ({k}, {n}) or ({n},)")
    return np.broadcast_to(z, (k, n)).copy()


def solve_batch(model, robot, targets, latents=None, seed=None, solver=None):
    """One flow pass for every ``(target_i, z_i)`` entry, with errors measured by FK.

    If the batched integration fails, entries are retried one by one and the
    ones that still fail are listed in ``failures`` with nan results.
    """
    model.signature.check(robot)
    pos, quat = _as_target_arrays(targets, robot.n_targets)
    k, n = pos.shape[0], robot.dof
    z = make_latents(k, n, latents, seed)
    cond = model.condition(pos, quat)
    q = np.full((k, n), np.nan)
    failures = []
    try:
        q[:] = cnf.forward(model, z, cond, solver)
    except SolverError as exc:
        log.warning("batched solve failed (%s); solving entries individually", exc)
        for i in range(k):
            try:
                q[i] = cnf.forward(model, z[i:i + 1], cond[i:i + 1], solver)[0]
            except SolverError:
                failures.append(i)
    ok = np.setdiff1d(np.arange(k), failures)
    pe = np.full((k, robot.n_targets), np.nan)
    oe = np.full((k, robot.n_targets), np.nan)
    if ok.size:
        p_hat, q_hat = robot.fk_batch(q[ok])
        pe[ok] = position_error(p_hat, pos[ok])
        oe[ok] = orientation_error(q_hat, quat[ok])
    return BatchResult(q, pe, oe, failures)


def latent_draws(seed, n_targets, n_samples, n):
    """Latents ``(targets, samples, n)`` drawn from ``seed`` alone."""
    return np.random.default_rng(seed).standard_normal((n_targets, n_samples, n))


def solve_targets(model, robot, pos, quat, z, solver=None):
    """Solve ``S`` latents per target, integrating each target as its own batch.

    ``z`` is ``(K, S, n)``. Returns ``(q, pos_err, ori_err, failed)`` with
    shapes ``(K, S, n)``, ``(K, S, m)``, ``(K, S, m)`` and a list of failed
    target indices (their entries are nan).
    """
    model.signature.check(robot)
    pos, quat = _as_target_arrays((pos, quat), robot.n_targets)
    K, S, n = z.shape
    m = robot.n_targets
    q = np.full((K, S, n), np.nan)
    pe = np.full((K, S, m), np.nan)
    oe = np.full((K, S, m), np.nan)
    failed = []
    for i in range(K):
        cond = np.repeat(model.condition(pos[i:i + 1], quat[i:i + 1]), S, axis=0)
        try:
            qi = cnf.forward(model, z[i], cond, solver)
        except SolverError as exc:
            log.warning("target %d failed: %s", i, exc)
            failed.append(i)
            continue
        p_hat, q_hat = robot.fk_batch(qi)
        q[i] = qi
        pe[i] = position_error(p_hat, pos[i][None])
        oe[i] = orientation_error(q_hat, quat[i][None])
    return q, pe, oe, failed


def path_continuity(q, step_threshold):
    """``(continuous, break_index, max_joint_step)`` for a joint path ``(k, n)``."""
    if q.shape[0] < 2:
        return True, None, 0.0
    steps = np.max(np.abs(np.diff(q, axis=0)), axis=1)
    if not np.all(np.isfinite(steps)):
        bad = int(np.flatnonzero(~np.isfinite(steps))[0]) + 1
        return False, bad, float("inf")
    over = np.flatnonzero(steps > step_threshold)
    max_step = float(steps.max())
    if over.size:
        return False, int(over[0]) + 1, max_step
    return True, None, max_step


def solve_path(model, robot, path, z, step_threshold=DEFAULT_STEP_THRESHOLD, solver=None):
    """Solve every waypoint with one shared latent and check the joint path for jumps."""
    pos, quat = _as_target_arrays(path, robot.n_targets)
    if pos.shape[0] < 2:
        raise ValueError("a path needs at least two waypoints")
    z = np.asarray(z, dtype=float).reshape(robot.dof)
    res = solve_batch(model, robot, (pos, quat), latents=z, solver=solver)
    continuous, idx, max_step = path_continuity(res.q, step_threshold)
    finite = np.all(np.isfinite(res.q), axis=1)
    within = bool(np.all((res.q[finite] >= robot.lower) & (res.q[finite] <= robot.upper)))
    return PathReport(res, continuous, idx, max_step, within, float(step_threshold), z.copy())


def retry_path(model, robot, path, max_retries=20, seed=0,
               step_threshold=DEFAULT_STEP_THRESHOLD, solver=None):
    """Redraw the shared latent until the path is continuous.

    Returns the first continuous report, otherwise the attempt with the
    smallest maximum joint step. ``report.attempt`` is the 0-based attempt index.
    """
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(max_retries):
        z = rng.standard_normal(robot.dof)
        rep = solve_path(model, robot, path, z, step_threshold, solver)
        rep.attempt = attempt
        if rep.continuous:
            return rep
        if best is None or rep.max_joint_step < best.max_joint_step:
            best = rep
    return best


# ---------------------------------------------------------------------------
# damped least squares
# ---------------------------------------------------------------------------

@dataclass
class DlsResult:
    q: np.ndarray
    converged: np.ndarray      # bool per row
    iterations: np.ndarray     # int per row
    pos_err: np.ndarray        # (K, m) at the returned q
    ori_err: np.ndarray


def _pose_residual(robot, q, pos, quat, ori_weight):
    p, r = robot.fk_batch(q)
    pe = position_error(p, pos)
    oe = orientation_error(r, quat)
    # space-frame rotation taking the current orientation onto the target
    rot = quat_log(quat_mul(quat, quat_conj(r)))
    e = np.concatenate([pos - p, ori_weight * rot], axis=2)   # (K, m, 6)
    return e.reshape(q.shape[0], -1), pe, oe


def dls_solve_batch(robot, pos, quat, q_init, damping=0.1, max_iters=200, tol_pos=1e-6,
                    tol_ori=1e-6, ori_weight=1.0, restarts=0, seed=None):
    """Vectorized damped least squares, ``q <- clip(q + J^T (J J^T + lambda^2 I)^-1 e)``.

    Revolute joints whose limits cover a full turn are wrapped into range
    rather than clipped. ``pos``/``quat`` are ``(K, m, 3)``/``(K, m, 4)``; rows stop updating once
    both tolerances hold. With ``ori_weight == 0`` orientation is ignored,
    including in the convergence test.

    Rows that fail to converge are restarted from uniform random joints up to
    ``restarts`` times (each restart gets ``max_iters`` more iterations);
    clamping at joint limits otherwise traps many random initializations.
    """
    res = _dls(robot, pos, quat, q_init, damping, max_iters, tol_pos, tol_ori, ori_weight)
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        bad = np.flatnonzero(~res.converged)
        if bad.size == 0:
            break
        q0 = sample_joints(robot, bad.size, rng)
        sub = _dls(robot, np.asarray(pos)[bad], np.asarray(quat)[bad], q0, damping, max_iters,
                   tol_pos, tol_ori, ori_weight)
        res.q[bad], res.converged[bad] = sub.q, sub.converged
        res.iterations[bad] += sub.iterations
        res.pos_err[bad], res.ori_err[bad] = sub.pos_err, sub.ori_err
    return res


def _full_turn(robot):
    """Mask of revolute joints whose limits span a whole turn; these wrap instead of clamping."""
    kinds = np.array([robot.joints[i].kind == "revolute" for i in robot.actuated], dtype=bool)
    return kinds & (robot.upper - robot.lower >= 2 * np.pi - 1e-9)


def _project(q, robot, wrap):
    q = q.copy()
    q[:, wrap] = robot.lower[wrap] + np.mod(q[:, wrap] - robot.lower[wrap], 2 * np.pi)
    return np.clip(q, robot.lower, robot.upper)


def _dls(robot, pos, quat, q_init, damping, max_iters, tol_pos, tol_ori, ori_weight):
    pos = np.asarray(pos, dtype=float)
    quat = canonicalize_quat(quat)
    wrap = _full_turn(robot)
    q = _project(np.array(q_init, dtype=float), robot, wrap)
    K, m = q.shape[0], robot.n_targets
    iters = np.zeros(K, dtype=int)
    done = np.zeros(K, dtype=bool)
    lam2 = damping ** 2
    weights = np.array([1, 1, 1] + [ori_weight] * 3, dtype=float)
    e, pe, oe = _pose_residual(robot, q, pos, quat, ori_weight)
    for it in range(max_iters + 1):
        ok = pe.max(axis=1) < tol_pos
        if ori_weight:
            ok &= oe.max(axis=1) < tol_ori
        done |= ok
        active = np.flatnonzero(~done)
        if active.size == 0 or it == max_iters:
            break
        qa = q[active]
        J = np.concatenate([robot.jacobian_batch(qa, j) * weights[:, None] for j in range(m)], axis=1)
        A = J @ np.swapaxes(J, 1, 2) + lam2 * np.eye(6 * m)
        dq = np.einsum("kij,ki->kj", J, np.linalg.solve(A, e[active][..., None])[..., 0])
        q[active] = _project(qa + dq, robot, wrap)
        iters[active] += 1
        e[active], pe[active], oe[active] = _pose_residual(
            robot, q[active], pos[active], quat[active], ori_weight)
    return DlsResult(q, done, iters, pe, oe)


def dls_solve(robot, targets, q_init, damping=0.1, max_iters=200, tol_pos=1e-6, tol_ori=1e-6,
              ori_weight=1.0, restarts=0, seed=None):
    """Single-target-set DLS; ``targets`` is a list of ``m`` Poses.

    Returns ``(q, converged, iterations)``.
    """
    pos, quat = _as_target_arrays([list(targets)], robot.n_targets)
    res = dls_solve_batch(robot, pos, quat, np.asarray(q_init, dtype=float)[None], damping,
                          max_iters, tol_pos, tol_ori, ori_weight, restarts, seed)
    return res.q[0], bool(res.converged[0]), int(res.iterations[0])


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_targets_csv(path_or_text, m):
    """Parse a target/path CSV: ``px,py,pz,qw,qx,qy,qz`` repeated ``m`` times per row.

    A header row is optional. Returns ``(k, m, 3)`` positions and canonical
    ``(k, m, 4)`` quaternions.
    """
    if hasattr(path_or_text, "read"):
        text = path_or_text.read()
    elif "\n" in str(path_or_text) or "," in str(path_or_text):
        text = str(path_or_text)
    else:
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and not all(_is_number(c) for c in row):
            continue
        if len(row) != 7 * m:
            raise TargetFileError(f"row {lineno}: expected {7 * m} columns, got {len(row)}")
        try:
            vals = np.array([float(c) for c in row])
        except ValueError:
            raise TargetFileError(f"row {lineno}: non-numeric value") from None
        if not np.all(np.isfinite(vals)):
            raise TargetFileError(f"row {lineno}: non-finite value")
        v = vals.reshape(m, 7)
        if np.any(np.linalg.norm(v[:, 3:], axis=1) < 1e-9):
            raise TargetFileError(f"row {lineno}: zero quaternion")
        rows.append(v)
    if not rows:
        raise TargetFileError("no target rows")
    arr = np.stack(rows)
    return arr[:, :, :3], canonicalize_quat(arr[:, :, 3:])


def targets_csv(pos, quat):
    """Serialize ``(k, m, 3)``/``(k, m, 4)`` targets to CSV text with a header."""
    k, m = pos.shape[:2]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_COLUMNS * m)
    for i in range(k):
        w.writerow([repr(float(v)) for j in range(m) for v in (*pos[i, j], *quat[i, j])])
    return buf.getvalue()

