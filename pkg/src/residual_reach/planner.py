"""Joint-space reference trajectories toward an end-effector goal.

The goal configuration comes from IK; the path to it is a minimum-jerk
interpolation stretched until every joint respects its velocity limit.
Obstacles are axis-aligned boxes checked at the end effector and the elbow
at every waypoint; a blocked path gets one via point pushed off the
straight line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import KinematicChain
from .kinematics import IkConfig, chain_frames, fk_array, solve_ik_many
from .se3 import Pose

DT = 0.02
DETOUR_DIRECTIONS = ((0, 0, 1), (0, 0, -1), (0, 1, 0), (0, -1, 0), (-1, 0, 0), (1, 0, 0))
DETOUR_DISTANCES = (0.1, 0.2, 0.3)


class IkInfeasible(RuntimeError):
    pass


class PlanBlocked(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.lo) >= np.asarray(self.hi)):
            raise ValueError("box lo must be below hi on every axis")

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(pts)
        return np.all((p > np.asarray(self.lo)) & (p < np.asarray(self.hi)), axis=-1)


@dataclass(frozen=True)
class PlanConfig:
    max_vel: float = 1.0  # rad/s, every joint
    dt: float = DT
    ik: IkConfig = IkConfig()
    elbow_joint: str = "elbow"
    detour_ik: IkConfig = IkConfig(pos_tol=5e-3, position_only=True, restarts=2)


@dataclass
class ReferenceTrajectory:
    waypoints: np.ndarray  # (T, dof)
    ee_refs: np.ndarray  # (T, 7)
    via: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.waypoints)

    def at(self, k: int) -> np.ndarray:
        """Waypoint ``k`` ticks after the start; holds the last one afterwards."""
        return self.waypoints[min(max(k, 0), self.horizon - 1)]


def min_jerk(q0, q1, max_vel, dt=DT) -> np.ndarray:
    """Waypoints after ``q0`` ending exactly at ``q1``; at least one."""
    q0 = np.asarray(q0, float)
    q1 = np.asarray(q1, float)
    span = np.max(np.abs(q1 - q0)) if q0.size else 0.0
    # peak speed of the quintic is 1.875 * span / duration
    n = max(1, int(np.ceil(1.875 * span / (max_vel * dt) - 1e-9)))
    tau = np.arange(1, n + 1) / n
    s = tau**3 * (10 - 15 * tau + 6 * tau**2)
    out = q0 + s[:, None] * (q1 - q0)
    out[-1] = q1  # q0 + (q1 - q0) can miss q1 by an ulp
    return out


def penetrations(chain: KinematicChain, waypoints, obstacles, elbow_joint="elbow") -> int:
    """Number of (waypoint, point) pairs inside any obstacle."""
    if not obstacles:
        return 0
    _, p, _, origins = chain_frames(chain, waypoints)
    pts = [p]
    if elbow_joint in chain.joint_names:
        pts.append(origins[:, chain.index(elbow_joint)])
    pts = np.stack(pts, axis=1)
    hits = np.zeros(pts.shape[:2], dtype=bool)
    for box in obstacles:
        hits |= box.contains(pts)
    return int(hits.sum())


def _solve(chain, targets, seed, cfg):
    q, _, _, conv, _, _ = solve_ik_many(chain, targets, np.broadcast_to(seed, (len(targets), chain.dof)), cfg)
    return q, conv


def plan(chain: KinematicChain, q_now, goal_ee, obstacles=(), cfg: PlanConfig = PlanConfig()) -> ReferenceTrajectory:
    q_now = np.asarray(q_now, dtype=float)
    if np.any(q_now < chain.lower - 1e-9) or np.any(q_now > chain.upper + 1e-9):
        raise ValueError("q_now outside joint limits")
    goal = goal_ee.to_array() if isinstance(goal_ee, Pose) else np.asarray(goal_ee, float)
    q, conv = _solve(chain, goal[None], q_now, cfg.ik)
    if not conv[0]:
        raise IkInfeasible("no IK solution within tolerance")
    return plan_to(chain, q_now, q[0], obstacles, cfg)


def plan_to(chain, q_now, q_goal, obstacles=(), cfg: PlanConfig = PlanConfig()) -> ReferenceTrajectory:
    """Trajectory to a known goal configuration, detouring around obstacles."""
    path = min_jerk(q_now, q_goal, cfg.max_vel, cfg.dt)
    obstacles = tuple(obstacles)
    if penetrations(chain, path, obstacles, cfg.elbow_joint) == 0:
        return _traj(chain, path)
    if penetrations(chain, q_goal[None], obstacles, cfg.elbow_joint):
        raise PlanBlocked("goal configuration is inside an obstacle")
    p0 = fk_array(chain, q_now)[:3]
    p1 = fk_array(chain, q_goal)[:3]
    mid = 0.5 * (p0 + p1)
    cands = [mid + d * np.asarray(u, float) for d in DETOUR_DISTANCES for u in DETOUR_DIRECTIONS]
    targets = np.concatenate([np.array(cands), np.tile([1.0, 0, 0, 0], (len(cands), 1))], axis=1)
    qv, conv = _solve(chain, targets, q_now, cfg.detour_ik)
    for k in np.flatnonzero(conv):
        via_path = np.vstack([min_jerk(q_now, qv[k], cfg.max_vel, cfg.dt),
                              min_jerk(qv[k], q_goal, cfg.max_vel, cfg.dt)])
        if penetrations(chain, via_path, obstacles, cfg.elbow_joint) == 0:
            return _traj(chain, via_path, via=qv[k])
    raise PlanBlocked("no collision-free detour found")


def _traj(chain, path, via=None):
    return ReferenceTrajectory(path, fk_array(chain, path), via=via)


def plan_batch(chain, q_now, goals, cfg: PlanConfig = PlanConfig()):
    """Obstacle-free plans for many goals at once (one IK batch).

    Returns a list with ``None`` where IK failed.
    """
    q_now = np.asarray(q_now, float)
    q, _, _, conv, _, _ = solve_ik_many(chain, np.asarray(goals, float), q_now, cfg.ik)
    out = []
    for i in range(len(goals)):
        out.append(_traj(chain, min_jerk(q_now[i], q[i], cfg.max_vel, cfg.dt)) if conv[i] else None)
    return out
