"""Forward kinematics, geometric Jacobian and damped-least-squares IK.

All array routines broadcast over leading batch axes of ``q`` so a whole
voxel grid or a batch of episodes is one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .chain import KinematicChain
from .se3 import (
    Pose,
    PoseError,
    matrix_to_quat,
    quat_to_matrix,
)


def _joint_consts(chain: KinematicChain):
    # cached per chain object; chains are immutable
    cached = getattr(chain, "_kin_consts", None)
    if cached is None:
        n = chain.dof
        Ro = np.empty((n + 1, 3, 3))
        to = np.empty((n + 1, 3))
        axes = np.zeros((n, 3))
        prismatic = np.zeros(n, dtype=np.bool_)
        for i, j in enumerate(chain.joints):
            Ro[i] = j.origin.rotation
            to[i] = j.origin.t
            axes[i] = j.axis
            prismatic[i] = j.kind == "prismatic"
        Ro[n] = chain.ee_offset.rotation
        to[n] = chain.ee_offset.t
        cached = (Ro, to, axes, prismatic)
        object.__setattr__(chain, "_kin_consts", cached)
    return cached


@numba.njit(cache=True)
def _walk_one(Ro, to, axes, prismatic, q, R, p, ax_out, or_out):
    """Single configuration; writes the EE frame into ``R``/``p``."""
    n = axes.shape[0]
    M = np.empty((3, 3))
    T = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            R[r, c] = 1.0 if r == c else 0.0
    px = 0.0
    py = 0.0
    pz = 0.0
    for i in range(n + 1):
        px += R[0, 0] * to[i, 0] + R[0, 1] * to[i, 1] + R[0, 2] * to[i, 2]
        py += R[1, 0] * to[i, 0] + R[1, 1] * to[i, 1] + R[1, 2] * to[i, 2]
        pz += R[2, 0] * to[i, 0] + R[2, 1] * to[i, 1] + R[2, 2] * to[i, 2]
        for r in range(3):
            for c in range(3):
                T[r, c] = R[r, 0] * Ro[i, 0, c] + R[r, 1] * Ro[i, 1, c] + R[r, 2] * Ro[i, 2, c]
        for r in range(3):
            for c in range(3):
                R[r, c] = T[r, c]
        if i == n:
            break
        x = axes[i, 0]
        y = axes[i, 1]
        z = axes[i, 2]
        wx = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z
        wy = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z
        wz = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z
        ax_out[i, 0] = wx
        ax_out[i, 1] = wy
        ax_out[i, 2] = wz
        or_out[i, 0] = px
        or_out[i, 1] = py
        or_out[i, 2] = pz
        qi = q[i]
        if prismatic[i]:
            px += wx * qi
            py += wy * qi
            pz += wz * qi
        else:
            s = np.sin(qi)
            c1 = 1.0 - np.cos(qi)
            # Rodrigues: I + s K + (1 - cos) K^2
            M[0, 0] = 1.0 - c1 * (y * y + z * z)
            M[0, 1] = -s * z + c1 * x * y
            M[0, 2] = s * y + c1 * x * z
            M[1, 0] = s * z + c1 * x * y
            M[1, 1] = 1.0 - c1 * (x * x + z * z)
            M[1, 2] = -s * x + c1 * y * z
            M[2, 0] = -s * y + c1 * x * z
            M[2, 1] = s * x + c1 * y * z
            M[2, 2] = 1.0 - c1 * (x * x + y * y)
            for r in range(3):
                for c in range(3):
                    T[r, c] = R[r, 0] * M[0, c] + R[r, 1] * M[1, c] + R[r, 2] * M[2, c]
            for r in range(3):
                for c in range(3):
                    R[r, c] = T[r, c]
    p[0] = px
    p[1] = py
    p[2] = pz


@numba.njit(cache=True)
def _walk(Ro, to, axes, prismatic, q, R_out, p_out, ax_out, or_out):
    for b in range(q.shape[0]):
        _walk_one(Ro, to, axes, prismatic, q[b], R_out[b], p_out[b], ax_out[b], or_out[b])


@numba.njit(cache=True)
def _rot_error(Rt, R, out):
    """Rotation vector of Rt @ R.T (base frame), via its quaternion."""
    m = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            m[r, c] = Rt[r, 0] * R[c, 0] + Rt[r, 1] * R[c, 1] + Rt[r, 2] * R[c, 2]
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > m[0, 0] and tr > m[1, 1] and tr > m[2, 2]:
        s = np.sqrt(1.0 + tr) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 1e-300)) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 1e-300)) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 1e-300)) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    if w < 0.0:
        w = -w
        x = -x
        y = -y
        z = -z
    sn = np.sqrt(x * x + y * y + z * z)
    if sn < 1e-12:
        k = 2.0
    else:
        k = 2.0 * np.arctan2(sn, w) / sn
    out[0] = k * x
    out[1] = k * y
    out[2] = k * z


@numba.njit(cache=True)
def _dls(Ro, to, axes, prismatic, lo, hi, tp, tR, seeds, damping, max_iters,
         pos_tol, rot_tol, max_pos_step, max_rot_step, position_only,
         best_q, best_pos, best_rot, converged, iters):
    n = axes.shape[0]
    rows = 3 if position_only else 6
    R = np.empty((3, 3))
    p = np.empty(3)
    ax = np.empty((n, 3))
    org = np.empty((n, 3))
    J = np.empty((rows, n))
    e = np.empty(rows)
    drot = np.empty(3)
    q = np.empty(n)
    lam2 = damping * damping
    for b in range(seeds.shape[0]):
        for i in range(n):
            q[i] = min(max(seeds[b, i], lo[i]), hi[i])
        best = np.inf
        best_pos[b] = np.inf
        best_rot[b] = np.inf
        converged[b] = False
        for it in range(max_iters + 1):
            _walk_one(Ro, to, axes, prismatic, q, R, p, ax, org)
            dx = tp[b, 0] - p[0]
            dy = tp[b, 1] - p[1]
            dz = tp[b, 2] - p[2]
            pos = np.sqrt(dx * dx + dy * dy + dz * dz)
            if position_only:
                rot = 0.0
                ok = pos < pos_tol
                score = pos / pos_tol
            else:
                _rot_error(tR[b], R, drot)
                rot = np.sqrt(drot[0] ** 2 + drot[1] ** 2 + drot[2] ** 2)
                ok = pos < pos_tol and rot < rot_tol
                score = pos / pos_tol + rot / rot_tol
            iters[b] = it
            if ok or score < best:
                best = score
                best_pos[b] = pos
                best_rot[b] = rot
                for i in range(n):
                    best_q[b, i] = q[i]
            if ok:
                converged[b] = True
                break
            if it == max_iters:
                break
            k = min(1.0, max_pos_step / max(pos, 1e-300))
            e[0] = dx * k
            e[1] = dy * k
            e[2] = dz * k
            if not position_only:
                k = min(1.0, max_rot_step / max(rot, 1e-300))
                e[3] = drot[0] * k
                e[4] = drot[1] * k
                e[5] = drot[2] * k
            for i in range(n):
                if prismatic[i]:
                    J[0, i] = ax[i, 0]
                    J[1, i] = ax[i, 1]
                    J[2, i] = ax[i, 2]
                    if not position_only:
                        J[3, i] = 0.0
                        J[4, i] = 0.0
                        J[5, i] = 0.0
                else:
                    lx = p[0] - org[i, 0]
                    ly = p[1] - org[i, 1]
                    lz = p[2] - org[i, 2]
                    J[0, i] = ax[i, 1] * lz - ax[i, 2] * ly
                    J[1, i] = ax[i, 2] * lx - ax[i, 0] * lz
                    J[2, i] = ax[i, 0] * ly - ax[i, 1] * lx
                    if not position_only:
                        J[3, i] = ax[i, 0]
                        J[4, i] = ax[i, 1]
                        J[5, i] = ax[i, 2]
            # joints pinned at a limit and pushed outward drop out of the
            # step, so the remaining joints take up the motion
            for _ in range(n):
                A = J @ J.T
                for r in range(rows):
                    A[r, r] += lam2
                y = np.linalg.solve(A, e)
                dq = J.T @ y
                pinned = False
                for i in range(n):
                    if dq[i] != 0.0 and ((q[i] <= lo[i] and dq[i] < 0.0) or (q[i] >= hi[i] and dq[i] > 0.0)):
                        for r in range(rows):
                            J[r, i] = 0.0
                        pinned = True
                if not pinned:
                    break
            for i in range(n):
                q[i] = min(max(q[i] + dq[i], lo[i]), hi[i])


def chain_frames(chain: KinematicChain, q):
    """Walk the chain.

    Returns ``(R_ee, p_ee, axes, origins)``: end-effector rotation (..., 3, 3)
    and position (..., 3), plus each joint's world axis and origin, both
    (..., dof, 3), evaluated before that joint's own motion.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != chain.dof:
        raise ValueError(f"expected {chain.dof} joint values, got {q.shape[-1]}")
    batch = q.shape[:-1]
    qf = np.ascontiguousarray(q.reshape(-1, chain.dof))
    m = qf.shape[0]
    R = np.empty((m, 3, 3))
    p = np.empty((m, 3))
    axes = np.empty((m, chain.dof, 3))
    origins = np.empty((m, chain.dof, 3))
    _walk(*_joint_consts(chain), qf, R, p, axes, origins)
    return (
        R.reshape(batch + (3, 3)),
        p.reshape(batch + (3,)),
        axes.reshape(batch + (chain.dof, 3)),
        origins.reshape(batch + (chain.dof, 3)),
    )


def fk_rt(chain: KinematicChain, q):
    R, p, _, _ = chain_frames(chain, q)
    return R, p


def fk_array(chain: KinematicChain, q):
    """End-effector pose arrays (..., 7) = [t, qw, qx, qy, qz]."""
    R, p = fk_rt(chain, q)
    return np.concatenate([p, matrix_to_quat(R)], axis=-1)


def fk(chain: KinematicChain, q) -> Pose:
    """End-effector pose in the chain's base frame for one configuration."""
    R, p = fk_rt(chain, np.asarray(q, dtype=float).reshape(chain.dof))
    return Pose.from_rt(R, p)


def _jacobian_from_frames(chain, p_ee, axes, origins):
    J = np.empty(p_ee.shape[:-1] + (6, chain.dof))
    lever = p_ee[..., None, :] - origins
    lin = np.cross(axes, lever)
    prismatic = np.array([j.kind == "prismatic" for j in chain.joints])
    if prismatic.any():
        lin[..., prismatic, :] = axes[..., prismatic, :]
        ang = axes.copy()
        ang[..., prismatic, :] = 0.0
    else:
        ang = axes
    J[..., :3, :] = np.swapaxes(lin, -1, -2)
    J[..., 3:, :] = np.swapaxes(ang, -1, -2)
    return J


def jacobian(chain: KinematicChain, q):
    """Geometric Jacobian (..., 6, dof) about the end-effector point.

    Rows 0-2 are linear velocity (m/rad), rows 3-5 angular velocity, both in
    the base frame.
    """
    _, p, axes, origins = chain_frames(chain, q)
    return _jacobian_from_frames(chain, p, axes, origins)


def fk_and_jacobian(chain: KinematicChain, q):
    R, p, axes, origins = chain_frames(chain, q)
    return R, p, _jacobian_from_frames(chain, p, axes, origins)


# ---------------------------------------------------------------------------
# inverse kinematics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IkConfig:
    damping: float = 0.05
    max_iters: int = 100
    pos_tol: float = 1e-4  # m
    rot_tol: float = 0.05  # deg
    position_only: bool = False
    # per-iteration error clamp, keeps DLS steps inside the linear regime
    max_pos_step: float = 0.1
    max_rot_step: float = 0.5
    # deterministic fallback seeds tried, in order, when the given seed fails
    restarts: int = 8


@dataclass
class IkResult:
    q: np.ndarray
    residual: PoseError
    converged: bool
    iterations: int
    attempts: int = 1


_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53)


def spread_seeds(chain: KinematicChain, k: int) -> np.ndarray:
    """``k`` fixed configurations spread over the joint-limit box.

    Row ``s`` uses the radical inverse of ``s + 1`` in a distinct prime base
    per joint (a Halton sequence), so the set is deterministic and nested:
    ``spread_seeds(c, k)`` is a prefix of ``spread_seeds(c, k + 1)``.
    """
    lo, hi = chain.lower, chain.upper
    u = np.empty((k, chain.dof))
    for s in range(k):
        for j in range(chain.dof):
            base = _PRIMES[j % len(_PRIMES)]
            f, x, i = 1.0, 0.0, s + 1
            while i:
                f /= base
                x += f * (i % base)
                i //= base
            u[s, j] = x
    return lo + u * (hi - lo)


def solve_ik_batch(chain: KinematicChain, targets, seeds, cfg: IkConfig = IkConfig()):
    """Damped least squares, row by row.

    ``targets`` is (N, 7) or, with ``cfg.position_only``, (N, 3); ``seeds`` is
    (N, dof).  Returns ``(q, pos_err, rot_err_deg, converged, iterations)``
    where ``q`` is the best iterate per row.  Each row is independent, so
    results do not depend on batch composition.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    seeds = np.ascontiguousarray(np.atleast_2d(np.asarray(seeds, dtype=float)))
    n = seeds.shape[0]
    tp = np.ascontiguousarray(targets[:, :3])
    if cfg.position_only or targets.shape[1] == 3:
        tR = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    else:
        tR = quat_to_matrix(targets[:, 3:])
    best_q = np.empty_like(seeds)
    best_pos = np.empty(n)
    best_rot = np.empty(n)
    converged = np.zeros(n, dtype=np.bool_)
    iters = np.zeros(n, dtype=np.int64)
    _dls(*_joint_consts(chain), chain.lower, chain.upper, tp, tR, seeds,
         float(cfg.damping), int(cfg.max_iters), float(cfg.pos_tol), float(np.radians(cfg.rot_tol)),
         float(cfg.max_pos_step), float(cfg.max_rot_step), bool(cfg.position_only),
         best_q, best_pos, best_rot, converged, iters)
    return best_q, best_pos, np.degrees(best_rot), converged, iters


def solve_ik_many(chain: KinematicChain, targets, seeds, cfg: IkConfig = IkConfig()):
    """:func:`solve_ik_batch` plus the fallback seeds for rows that fail.

    Fallbacks run in a fixed order and the first converged one wins, so the
    answer is deterministic.  Also returns the number of attempts per row.
    """
    q, pos, rot, conv, iters = solve_ik_batch(chain, targets, seeds, cfg)
    attempts = np.ones(len(q), dtype=int)
    if cfg.restarts <= 0 or conv.all():
        return q, pos, rot, conv, iters, attempts
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    rot_tol = cfg.rot_tol if cfg.rot_tol > 0 else 1.0
    score = pos / cfg.pos_tol + (0.0 if cfg.position_only else rot / rot_tol)
    for seed in spread_seeds(chain, cfg.restarts):
        todo = np.flatnonzero(~conv)
        if todo.size == 0:
            break
        rq, rp, rr, rc, ri = solve_ik_batch(chain, targets[todo], np.repeat(seed[None], todo.size, 0), cfg)
        attempts[todo] += 1
        rs = rp / cfg.pos_tol + (0.0 if cfg.position_only else rr / rot_tol)
        take = rc | (rs < score[todo])
        idx = todo[take]
        q[idx], pos[idx], rot[idx], conv[idx], iters[idx], score[idx] = (
            rq[take], rp[take], rr[take], rc[take], ri[take], rs[take])
    return q, pos, rot, conv, iters, attempts


def solve_ik(chain: KinematicChain, target: Pose, seed, cfg: IkConfig = IkConfig()) -> IkResult:
    """Solve for joints reaching ``target``; never raises on failure.

    ``converged`` is False when every attempt ran out of iterations; ``q`` is
    then the best iterate seen, always inside the joint limits.
    """
    tgt = target.to_array()[None]
    q, pos, rot, conv, iters, att = solve_ik_many(chain, tgt, np.asarray(seed, dtype=float)[None], cfg)
    return IkResult(q[0], PoseError(float(pos[0]), float(rot[0])), bool(conv[0]), int(iters[0]), int(att[0]))
