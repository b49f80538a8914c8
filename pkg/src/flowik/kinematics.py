"""Rigid kinematic trees: forward kinematics, Jacobians, pose errors, sampling.

Quaternions are stored scalar-first, ``(w, x, y, z)``, and canonicalized to
the ``w >= 0`` hemisphere. Batched routines take joint arrays of shape
``(B, n)`` and return positions ``(B, m, 3)`` and quaternions ``(B, m, 4)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("revolute", "prismatic", "fixed")


class RobotSpecError(ValueError):
    """Raised when a robot description violates a structural invariant."""


# ---------------------------------------------------------------------------
# quaternion helpers (batched over leading axes)
# ---------------------------------------------------------------------------

def canonicalize_quat(q):
    """Normalize and flip quaternions into the ``w >= 0`` hemisphere.

    When ``w == 0`` the first nonzero vector component is made positive.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    lead = q[..., 0]
    for k in (1, 2, 3):
        lead = np.where(lead == 0.0, q[..., k], lead)
    # "+ 0.0" clears negative zeros so printed and serialized poses are stable
    return np.where((lead < 0.0)[..., None], -q, q) + 0.0


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    # symmetric pairs are grouped so that conj(q) * q has an exactly zero vector part
    return np.stack([
        aw * bw - (ax * bx + ay * by + az * bz),
        (aw * bx + ax * bw) + (ay * bz - az * by),
        (aw * by + ay * bw) + (az * bx - ax * bz),
        (aw * bz + az * bw) + (ax * by - ay * bx),
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def matrix_to_quat(R):
    """Rotation matrices ``(..., 3, 3)`` to canonical quaternions ``(..., 4)``.

    Uses the largest-diagonal branch for each matrix so the square root is
    always taken of a quantity bounded away from zero.
    """
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cands = np.stack([tr, m00, m11, m22], axis=-1)
    branch = np.argmax(cands, axis=-1)

    out = np.empty(R.shape[:-2] + (4,))
    s = np.sqrt(np.maximum(1.0 + 2.0 * np.max(cands, axis=-1) - tr, 1e-300)) * 2.0
    # branch 0: w largest
    w0 = np.stack([0.25 * s, (R[..., 2, 1] - R[..., 1, 2]) / s,
                   (R[..., 0, 2] - R[..., 2, 0]) / s, (R[..., 1, 0] - R[..., 0, 1]) / s], -1)
    w1 = np.stack([(R[..., 2, 1] - R[..., 1, 2]) / s, 0.25 * s,
                   (R[..., 0, 1] + R[..., 1, 0]) / s, (R[..., 0, 2] + R[..., 2, 0]) / s], -1)
    w2 = np.stack([(R[..., 0, 2] - R[..., 2, 0]) / s, (R[..., 0, 1] + R[..., 1, 0]) / s,
                   0.25 * s, (R[..., 1, 2] + R[..., 2, 1]) / s], -1)
    w3 = np.stack([(R[..., 1, 0] - R[..., 0, 1]) / s, (R[..., 0, 2] + R[..., 2, 0]) / s,
                   (R[..., 1, 2] + R[..., 2, 1]) / s, 0.25 * s], -1)
    for k, cand in enumerate((w0, w1, w2, w3)):
        mask = branch == k
        out[mask] = cand[mask]
    return canonicalize_quat(out)


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about a unit ``axis`` by ``angle`` (batched over angle)."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def quat_log(q):
    """Rotation vector (axis times angle) of unit quaternions, angle in [0, pi]."""
    q = canonicalize_quat(q)
    v = q[..., 1:]
    vn = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(vn, q[..., 0])
    scale = np.where(vn > 1e-12, angle / np.where(vn > 1e-12, vn, 1.0), 2.0)
    return v * scale[..., None]


# ---------------------------------------------------------------------------
# poses and errors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        q = canonicalize_quat(np.asarray(self.orientation, dtype=float).reshape(4))
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    def as_vector(self):
        return np.concatenate([self.position, self.orientation])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:7])


def position_error(a, b):
    """Euclidean distance between positions; accepts Poses or ``(..., 3)`` arrays."""
    pa = a.position if isinstance(a, Pose) else np.asarray(a, dtype=float)
    pb = b.position if isinstance(b, Pose) else np.asarray(b, dtype=float)
    return np.linalg.norm(pa - pb, axis=-1)


def orientation_error(a, b):
    """Geodesic angle between orientations, in radians within ``[0, pi]``.

    Equal to ``2 acos(|<qa, qb>|)``; evaluated through the relative rotation
    with ``atan2`` to stay accurate for tiny angles.
    """
    qa = canonicalize_quat(a.orientation if isinstance(a, Pose) else a)
    qb = canonicalize_quat(b.orientation if isinstance(b, Pose) else b)
    rel = quat_mul(quat_conj(qb), qa)
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))


# ---------------------------------------------------------------------------
# robot model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointSpec:
    """One joint of the tree.

    The joint frame is the parent frame moved by ``origin``; the joint then
    rotates about (or slides along) ``axis`` expressed in that joint frame.
    """

    name: str
    kind: str
    parent: int
    origin: Pose = field(default_factory=lambda: Pose(np.zeros(3)))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    lower: float = 0.0
    upper: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RobotSpecError(f"joint {self.name!r}: unknown kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", axis)
        if self.kind != "fixed":
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise RobotSpecError(f"joint {self.name!r}: axis is not unit length")
            if not self.lower <= self.upper:
                raise RobotSpecError(f"joint {self.name!r}: lower limit exceeds upper limit")


class KinematicModel:
    """Immutable kinematic tree with one or more end-effector frames."""

    def __init__(self, joints, end_effectors, name="robot"):
        self.name = name
        self.joints = tuple(joints)
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise RobotSpecError("duplicate joint names")
        for i, j in enumerate(self.joints):
            if not -1 <= j.parent < i:
                raise RobotSpecError(
                    f"joint {j.name!r}: parent index {j.parent} is not an earlier joint")
        ees = []
        for e in end_effectors:
            idx = names.index(e) if isinstance(e, str) and e in names else e
            if not isinstance(idx, (int, np.integer)) or not 0 <= idx < len(self.joints):
                raise RobotSpecError(f"end effector {e!r} does not name an existing frame")
            ees.append(int(idx))
        if not ees:
            raise RobotSpecError("at least one end effector is required")
        self.end_effectors = tuple(ees)

        self.actuated = tuple(i for i, j in enumerate(self.joints) if j.kind != "fixed")
        self._qindex = {ji: k for k, ji in enumerate(self.actuated)}
        self.lower = np.array([self.joints[i].lower for i in self.actuated])
        self.upper = np.array([self.joints[i].upper for i in self.actuated])
        self._origin_R = [quat_to_matrix(j.origin.orientation) for j in self.joints]
        # actuated joints that move each end effector
        self._ancestors = []
        for e in self.end_effectors:
            chain = []
            k = e
            while k >= 0:
                if k in self._qindex:
                    chain.append(self._qindex[k])
                k = self.joints[k].parent
            self._ancestors.append(sorted(chain))

    @property
    def dof(self):
        return len(self.actuated)

    @property
    def n_targets(self):
        return len(self.end_effectors)

    def ancestors(self, ee_index):
        """Columns of ``q`` that move end effector ``ee_index``."""
        return list(self._ancestors[ee_index])

    def reach(self, ee_index=0):
        """Sum of link offsets along the chain of an end effector (an upper bound on reach)."""
        total = 0.0
        k = self.end_effectors[ee_index]
        while k >= 0:
            total += float(np.linalg.norm(self.joints[k].origin.position))
            k = self.joints[k].parent
        return total

    def to_dict(self):
        def joint(j):
            d = {
                "name": j.name,
                "kind": j.kind,
                "parent": None if j.parent < 0 else self.joints[j.parent].name,
                "origin": {"position": j.origin.position.tolist(),
                           "orientation": j.origin.orientation.tolist()},
            }
            if j.kind != "fixed":
                d["axis"] = j.axis.tolist()
                d["limits"] = [j.lower, j.upper]
            return d
        return {
            "name": self.name,
            "joints": [joint(j) for j in self.joints],
            "end_effectors": [self.joints[e].name for e in self.end_effectors],
        }

    def signature_hash(self):
        """Hash of the canonical model content (not of the file bytes)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- kinematics -------------------------------------------------------

    def _frames(self, q):
        q = np.asarray(q, dtype=float)
        if q.ndim != 2 or q.shape[1] != self.dof:
            raise ValueError(f"expected joint array with {self.dof} columns, got shape {q.shape}")
        B = q.shape[0]
        Rs, ps, axes, pivots = [], [], {}, {}
        for i, j in enumerate(self.joints):
            if j.parent < 0:
                Rp = np.broadcast_to(np.eye(3), (B, 3, 3))
                pp = np.zeros((B, 3))
            else:
                Rp, pp = Rs[j.parent], ps[j.parent]
            R0 = Rp @ self._origin_R[i]
            p0 = pp + Rp @ j.origin.position
            if j.kind == "fixed":
                R, p = R0, p0
            else:
                k = self._qindex[i]
                w = R0 @ j.axis
                axes[k], pivots[k] = w, p0
                if j.kind == "revolute":
                    R = R0 @ axis_angle_matrix(j.axis, q[:, k])
                    p = p0
                else:
                    R = R0
                    p = p0 + w * q[:, k:k + 1]
            Rs.append(R)
            ps.append(p)
        return Rs, ps, axes, pivots

    def fk_batch(self, q):
        """Batched forward kinematics: ``(B, n)`` -> positions ``(B, m, 3)``, quats ``(B, m, 4)``."""
        Rs, ps, _, _ = self._frames(q)
        pos = np.stack([ps[e] for e in self.end_effectors], axis=1)
        quat = matrix_to_quat(np.stack([Rs[e] for e in self.end_effectors], axis=1))
        return pos, quat

    def jacobian_batch(self, q, ee_index=0):
        """Space-frame geometric Jacobians ``(B, 6, n)``: linear rows, then angular rows."""
        if not 0 <= ee_index < self.n_targets:
            raise IndexError(f"end effector index {ee_index} out of range")
        Rs, ps, axes, pivots = self._frames(q)
        B = ps[0].shape[0]
        pe = ps[self.end_effectors[ee_index]]
        J = np.zeros((B, 6, self.dof))
        for k in self._ancestors[ee_index]:
            w = axes[k]
            if self.joints[self.actuated[k]].kind == "revolute":
                J[:, :3, k] = np.cross(w, pe - pivots[k])
                J[:, 3:, k] = w
            else:
                J[:, :3, k] = w
        return J


def forward_kinematics(model, q):
    """End-effector poses for a single joint vector, one Pose per end effector."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.shape[0] != model.dof:
        raise ValueError(f"joint vector has length {q.size}, robot has {model.dof} dof")
    pos, quat = model.fk_batch(q[None, :])
    return [Pose(pos[0, i], quat[0, i]) for i in range(model.n_targets)]


def jacobian(model, q, ee_index=0):
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.shape[0] != model.dof:
        raise ValueError(f"joint vector has length {q.size}, robot has {model.dof} dof")
    return model.jacobian_batch(q[None, :], ee_index)[0]


def sample_joints(model, count, seed):
    """``count`` i.i.d. uniform joint vectors within the limits, shape ``(count, n)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random((count, model.dof))
    # lower + u * (upper - lower) can round past upper
    return np.clip(model.lower + u * (model.upper - model.lower), model.lower, model.upper)


# ---------------------------------------------------------------------------
# robot spec files
# ---------------------------------------------------------------------------

def model_from_dict(doc):
    if not isinstance(doc, dict) or "joints" not in doc:
        raise RobotSpecError("robot spec must be an object with a 'joints' list")
    joints, names = [], []
    for raw in doc["joints"]:
        name = raw.get("name")
        if not name:
            raise RobotSpecError("joint without a name")
        kind = raw.get("kind", "revolute")
        parent = raw.get("parent")
        if parent is None:
            pidx = -1
        elif parent in names:
            pidx = names.index(parent)
        else:
            raise RobotSpecError(f"joint {name!r}: parent {parent!r} is not declared before it")
        origin = raw.get("origin", {})
        try:
            pose = Pose(origin.get("position", [0, 0, 0]),
                        origin.get("orientation", [1, 0, 0, 0]))
        except (ValueError, ZeroDivisionError) as exc:
            raise RobotSpecError(f"joint {name!r}: bad origin ({exc})") from None
        axis = np.asarray(raw.get("axis", [0, 0, 1]), dtype=float)
        if kind != "fixed":
            norm = np.linalg.norm(axis)
            if not np.isfinite(norm) or norm < 1e-12:
                raise RobotSpecError(f"joint {name!r}: zero axis")
            axis = axis / norm
            limits = raw.get("limits")
            if limits is None or len(limits) != 2:
                raise RobotSpecError(f"joint {name!r}: 'limits' must be [lower, upper]")
            lower, upper = float(limits[0]), float(limits[1])
        else:
            lower = upper = 0.0
        joints.append(JointSpec(name, kind, pidx, pose, axis, lower, upper))
        names.append(name)
    ees = doc.get("end_effectors", [])
    for e in ees:
        if e not in names:
            raise RobotSpecError(f"end effector {e!r} does not name a joint frame")
    return KinematicModel(joints, ees, name=doc.get("name", "robot"))


def load_robot(path):
    """Load and validate a robot JSON file.

    Bare names such as ``"planar3r"`` resolve to the robots bundled with the
    package when no such file exists.
    """
    p = Path(path)
    if not p.exists():
        bundled = Path(__file__).parent / "robots" / f"{p.stem}.json"
        if p.suffix in ("", ".json") and p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"robot spec not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise RobotSpecError(f"{path}: malformed JSON ({exc})") from None
    return model_from_dict(doc)
