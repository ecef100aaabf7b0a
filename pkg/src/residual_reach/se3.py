"""Rigid-body pose algebra.

Poses are stored as translation + unit quaternion ``(w, x, y, z)``.  The
composition operators follow a right-to-left convention::

    compose(a, b)     == M(b) @ M(a)
    inv_compose(a, b) == inv(M(b)) @ M(a)

so ``compose(estimate, residual)`` applies ``residual`` on the *left* of the
estimate.  Every caller in this package relies on that order.

The array helpers (``quat_*``, ``*_arrays``) broadcast over leading axes and
are what the batched kinematics and models use; :class:`Pose` is the scalar
value type used at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateRot6D(ValueError):
    """Raised when a 6D rotation cannot be orthonormalised."""


# ---------------------------------------------------------------------------
# quaternion primitives, shape (..., 4)
# ---------------------------------------------------------------------------

def quat_mul(q1, q2):
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1, dtype=float), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2, dtype=float), -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    """Unit-normalise and flip to the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(R):
    """Rotation matrices (..., 3, 3) to canonical quaternions (..., 4).

    Uses the largest-diagonal branch per element so no branch divides by a
    small number.
    """
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cands = np.stack([tr, m00, m11, m22], axis=-1)
    branch = np.argmax(cands, axis=-1)
    out = np.empty(R.shape[:-2] + (4,))

    s = np.sqrt(np.maximum(1.0 + np.where(branch == 0, tr, 0.0), 1e-300)) * 2.0
    b0 = np.stack(
        [0.25 * s, (R[..., 2, 1] - R[..., 1, 2]) / s,
         (R[..., 0, 2] - R[..., 2, 0]) / s, (R[..., 1, 0] - R[..., 0, 1]) / s],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 1e-300)) * 2.0
    b1 = np.stack(
        [(R[..., 2, 1] - R[..., 1, 2]) / s, 0.25 * s,
         (R[..., 0, 1] + R[..., 1, 0]) / s, (R[..., 0, 2] + R[..., 2, 0]) / s],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 1e-300)) * 2.0
    b2 = np.stack(
        [(R[..., 0, 2] - R[..., 2, 0]) / s, (R[..., 0, 1] + R[..., 1, 0]) / s,
         0.25 * s, (R[..., 1, 2] + R[..., 2, 1]) / s],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 1e-300)) * 2.0
    b3 = np.stack(
        [(R[..., 1, 0] - R[..., 0, 1]) / s, (R[..., 0, 2] + R[..., 2, 0]) / s,
         (R[..., 1, 2] + R[..., 2, 1]) / s, 0.25 * s],
        axis=-1,
    )
    b = branch[..., None]
    out = np.where(b == 0, b0, np.where(b == 1, b1, np.where(b == 2, b2, b3)))
    return quat_normalize(out)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x -> 1/2 as x -> 0
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def quat_to_rotvec(q):
    """Rotation vector of the shortest rotation represented by ``q``."""
    q = quat_normalize(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    k = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    return k * v


def quat_angle(q):
    """Geodesic angle (radians) of rotation ``q``, in [0, pi]."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


# ---------------------------------------------------------------------------
# pose arrays, shape (..., 7) = [tx, ty, tz, qw, qx, qy, qz]
# ---------------------------------------------------------------------------

IDENTITY7 = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


def compose_arrays(a, b):
    """Batched ``compose``: M(b) @ M(a)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = b[..., :3] + quat_rotate(b[..., 3:], a[..., :3])
    q = quat_normalize(quat_mul(b[..., 3:], a[..., 3:]))
    return np.concatenate([t, q], axis=-1)


def inverse_arrays(a):
    a = np.asarray(a, dtype=float)
    qc = quat_conj(a[..., 3:])
    t = -quat_rotate(qc, a[..., :3])
    return np.concatenate([t, quat_normalize(qc)], axis=-1)


def inv_compose_arrays(a, b):
    """Batched ``inv_compose``: inv(M(b)) @ M(a)."""
    return compose_arrays(a, inverse_arrays(b))


def arrays_to_matrices(p):
    p = np.asarray(p, dtype=float)
    m = np.zeros(p.shape[:-1] + (4, 4))
    m[..., :3, :3] = quat_to_matrix(p[..., 3:])
    m[..., :3, 3] = p[..., :3]
    m[..., 3, 3] = 1.0
    return m


def matrices_to_arrays(m):
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :3, 3], matrix_to_quat(m[..., :3, :3])], axis=-1)


def translation_errors(actual, target):
    actual = np.asarray(actual, dtype=float)
    target = np.asarray(target, dtype=float)
    return np.linalg.norm(actual[..., :3] - target[..., :3], axis=-1)


def rotation_errors_deg(actual, target):
    actual = np.asarray(actual, dtype=float)
    target = np.asarray(target, dtype=float)
    rel = quat_mul(quat_conj(target[..., 3:]), actual[..., 3:])
    return np.degrees(quat_angle(rel))


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------

ROT6D_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot6d_from_matrix(R):
    """First two columns of ``R`` flattened as ``(a, b)``, shape (..., 6)."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def matrix_from_rot6d(v, eps=1e-6):
    """Gram-Schmidt decode of a 6D rotation (..., 6) into (..., 3, 3).

    Raises :class:`DegenerateRot6D` if any ``a`` is near zero or ``a`` and
    ``b`` are near parallel.
    """
    v = np.asarray(v, dtype=float)
    a, b = v[..., :3], v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= eps):
        raise DegenerateRot6D("first column has near-zero norm")
    c1 = a / na
    b_perp = b - np.sum(b * c1, axis=-1, keepdims=True) * c1
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb <= eps):
        raise DegenerateRot6D("columns are parallel or second column is zero")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def safe_matrix_from_rot6d(v, eps=1e-6):
    """Like :func:`matrix_from_rot6d` but maps degenerate rows to identity.

    Used on network outputs, which must always decode to a rotation.
    """
    v = np.array(v, dtype=float, copy=True)
    a, b = v[..., :3], v[..., 3:6]
    bad = np.linalg.norm(a, axis=-1) <= eps
    if np.any(~bad):
        c1 = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), eps)
        bp = b - np.sum(b * c1, axis=-1, keepdims=True) * c1
        bad |= np.linalg.norm(bp, axis=-1) <= eps
    v[bad] = ROT6D_IDENTITY
    return matrix_from_rot6d(v, eps=eps)


# ---------------------------------------------------------------------------
# scalar value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation ``t`` (m) and unit quaternion ``r`` (w, x, y, z)."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        r = quat_normalize(np.array(self.r, dtype=float).reshape(4))
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float).reshape(7)
        return cls(a[:3], a[3:])

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, 3], matrix_to_quat(m[:3, :3]))

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(t, matrix_to_quat(R))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.t, self.r])

    def to_list(self) -> list:
        return [float(x) for x in self.to_array()]

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.r)

    def as_matrix(self) -> np.ndarray:
        return arrays_to_matrices(self.to_array())

    def inverse(self) -> "Pose":
        return Pose.from_array(inverse_arrays(self.to_array()))

    def transform_points(self, pts):
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.t

    def allclose(self, other: "Pose", atol=1e-9) -> bool:
        if not np.allclose(self.t, other.t, atol=atol, rtol=0.0):
            return False
        # quaternions are canonical, but w ~ 0 leaves a sign ambiguity
        return bool(
            np.allclose(self.r, other.r, atol=atol, rtol=0.0)
            or np.allclose(self.r, -other.r, atol=atol, rtol=0.0)
        )

    def __repr__(self):
        t = ", ".join(f"{x:.6g}" for x in self.t)
        r = ", ".join(f"{x:.6g}" for x in self.r)
        return f"Pose(t=[{t}], r=[{r}])"


@dataclass(frozen=True)
class PoseError:
    trans_err: float  # meters
    rot_err: float  # degrees, geodesic


def compose(p1: Pose, p2: Pose) -> Pose:
    """Right-to-left composition: returns M(p2) @ M(p1).

    Note the argument order: ``p1`` is applied first, ``p2`` on its left.
    """
    return Pose.from_array(compose_arrays(p1.to_array(), p2.to_array()))


def inv_compose(p1: Pose, p2: Pose) -> Pose:
    """Inverse composition: returns inv(M(p2)) @ M(p1).

    Satisfies ``compose(inv_compose(p1, p2), p2) == p1``.
    """
    return Pose.from_array(inv_compose_arrays(p1.to_array(), p2.to_array()))


def residual_between(estimate: Pose, truth: Pose) -> Pose:
    """The correction ``c`` with ``compose(estimate, c) == truth``.

    Under the right-to-left convention this is M(truth) @ inv(M(estimate)).
    """
    return compose(estimate.inverse(), truth)


def pose_error(actual: Pose, target: Pose) -> PoseError:
    trans = float(np.linalg.norm(actual.t - target.t))
    rel = quat_mul(quat_conj(target.r), actual.r)
    return PoseError(trans, float(np.degrees(quat_angle(rel))))


def rot6d_from_pose(p: Pose) -> np.ndarray:
    return rot6d_from_matrix(p.rotation)


def pose_rot_from_rot6d(v) -> np.ndarray:
    """Decode a 6-vector into a proper rotation matrix (Gram-Schmidt)."""
    return matrix_from_rot6d(np.asarray(v, dtype=float).reshape(6))


def pose_to_9d(p):
    """Translation + 6D rotation features, (..., 7) -> (..., 9)."""
    p = np.asarray(p, dtype=float)
    return np.concatenate([p[..., :3], rot6d_from_matrix(quat_to_matrix(p[..., 3:]))], axis=-1)


def rot_z(angle: float) -> Pose:
    return Pose(np.zeros(3), quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), angle))


def from_translation(x=0.0, y=0.0, z=0.0) -> Pose:
    return Pose(np.array([x, y, z], dtype=float))
