"""Closed-loop reaching: estimate, adjust, replan, track.

Each 50 Hz tick the loop estimates the end-effector pose and the base motion
since the episode start, expresses the goal in the current base frame, and
forms the residual pose error.  A proportional follower commands the
reference waypoint minus a damped-least-squares correction of that error.
Many goals run in lockstep so a sweep costs one vectorized loop.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .chain import KinematicChain, bundled_chain
from .io_utils import dumps_jsonl, loads_jsonl
from .kinematics import fk_and_jacobian, fk_array
from .plant import DT, Plant, PlantConfig
from .planner import IkInfeasible, PlanConfig, ReferenceTrajectory, min_jerk
from .residual import analytical_odometry_arrays, current_goal
from .se3 import (
    IDENTITY7,
    Pose,
    compose_arrays,
    inv_compose_arrays,
    inverse_arrays,
    quat_rotate,
    quat_to_rotvec,
    rotation_errors_deg,
)

ESTIMATORS = ("neural", "analytical", "mocap")
ABLATION_KEYS = ("use_neural_fk", "use_neural_odom", "use_goal_adjust", "use_replan", "use_grasp", "oracle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GoalAdjustConfig:
    alpha: float = 1.6
    start_thresh: float = 0.15
    stop_thresh: float = 0.02

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be at least 1")
        if not 0 < self.stop_thresh < self.start_thresh:
            raise ValueError("need 0 < stop_thresh < start_thresh")


def adjust_translation(t, cfg: GoalAdjustConfig = GoalAdjustConfig()):
    """Scale translation rows whose norm lies in (stop, start]; returns (t', active)."""
    t = np.asarray(t, dtype=float)
    d = np.linalg.norm(t, axis=-1)
    active = (d > cfg.stop_thresh) & (d <= cfg.start_thresh)
    return np.where(active[..., None], cfg.alpha * t, t), active


def adjust_goal(err: Pose, cfg: GoalAdjustConfig = GoalAdjustConfig()) -> Pose:
    """Inflate the translation of the residual error inside the band; rotation untouched."""
    t, active = adjust_translation(err.t, cfg)
    return Pose(t, err.r) if active else err


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 1500
    replan_every: int = 300
    use_replan: bool = True
    use_goal_adjust: bool = True
    goal_adjust: GoalAdjustConfig = GoalAdjustConfig()
    ee_estimator: str = "neural"
    base_estimator: str = "neural"
    grasp_thresh: float | None = 0.015
    gain: float = 1.0
    damping: float = 0.05
    plan: PlanConfig = PlanConfig()

    def __post_init__(self):
        for est in (self.ee_estimator, self.base_estimator):
            if est not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {est!r}")
        if self.horizon < 1 or self.replan_every < 1:
            raise ConfigError("horizon and replan_every must be positive")

    def with_ablations(self, ablations: dict) -> "EpisodeConfig":
        """Apply ``{key: bool}`` switches; see ABLATION_KEYS."""
        unknown = set(ablations) - set(ABLATION_KEYS)
        if unknown:
            raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
        cfg = self
        for key, on in ablations.items():
            if key == "use_neural_fk":
                cfg = replace(cfg, ee_estimator="neural" if on else "analytical")
            elif key == "use_neural_odom":
                cfg = replace(cfg, base_estimator="neural" if on else "analytical")
            elif key == "use_goal_adjust":
                cfg = replace(cfg, use_goal_adjust=bool(on))
            elif key == "use_replan":
                cfg = replace(cfg, use_replan=bool(on))
            elif key == "use_grasp":
                cfg = replace(cfg, grasp_thresh=cfg.grasp_thresh if on else None)
            elif key == "oracle" and on:
                cfg = replace(cfg, ee_estimator="mocap", base_estimator="mocap")
        return cfg

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Estimators:
    """Trained models; either may be None when only analytical/mocap estimation is used."""

    fk: object = None
    odom: object = None


LOG_ARRAYS = ("q_cmd", "q_ref", "q_meas", "de_est", "de_true", "ee_est", "ee_true",
              "base_est", "base_true", "replan_flag", "adjust_active", "grasp_closed")


@dataclass
class RolloutLog:
    """Per-tick record of one episode.

    ``base_est``/``base_true`` are base poses relative to the episode start.
    ``de_est`` is the estimated end effector against the current reference
    pose, the signal the follower acts on.  ``de_true`` is the true end
    effector against the base-compensated goal.
    """

    t: np.ndarray
    q_cmd: np.ndarray
    q_ref: np.ndarray
    q_meas: np.ndarray
    de_est: np.ndarray
    de_true: np.ndarray
    ee_est: np.ndarray
    ee_true: np.ndarray
    base_est: np.ndarray
    base_true: np.ndarray
    replan_flag: np.ndarray
    adjust_active: np.ndarray
    grasp_closed: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.t)

    def final_errors(self):
        """(translation m, rotation deg) of the true residual at the last tick."""
        last = self.de_true[-1]
        return float(np.linalg.norm(last[:3])), float(rotation_errors_deg(last, np.array([0, 0, 0, 1.0, 0, 0, 0])))

    def final_joint_error(self) -> float:
        return float(np.linalg.norm(self.q_meas[-1] - self.q_ref[-1]))

    @property
    def converged(self) -> bool:
        return bool(self.grasp_closed[-1])

    def to_jsonl(self) -> str:
        recs = []
        for k in range(self.horizon):
            r = {"t": int(self.t[k])}
            for name in LOG_ARRAYS:
                v = getattr(self, name)[k]
                r[name] = bool(v) if v.dtype == bool else [float(x) for x in np.atleast_1d(v)]
            recs.append(r)
        return dumps_jsonl(self.meta, recs)

    @classmethod
    def from_jsonl(cls, text: str) -> "RolloutLog":
        meta, recs = loads_jsonl(text)
        cols = {"t": np.array([r["t"] for r in recs], dtype=int)}
        for name in LOG_ARRAYS:
            vals = [r[name] for r in recs]
            cols[name] = np.array(vals, dtype=bool if isinstance(vals[0], bool) else float)
        return cls(**cols, meta=meta)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _dls_correction(J, e, damping):
    """Damped least squares J^T (J J^T + l^2 I)^-1 e, batched."""
    JJt = J @ np.swapaxes(J, -1, -2)
    JJt = JJt + (damping**2) * np.eye(J.shape[-2])
    return np.einsum("bji,bj->bi", J, np.linalg.solve(JJt, e[..., None])[..., 0])


def _clamped_command(chain, q_ref, J, e, gain, damping):
    """``q_ref - gain * dq`` within limits, re-solving without joints the clip would waste.

    A joint pinned at a limit cannot take its share of the correction, so
    its Jacobian column is dropped and the rest re-solved (a few passes).
    """
    lo, hi = chain.lower, chain.upper
    J = J.copy()
    for _ in range(3):
        raw = q_ref - gain * _dls_correction(J, e, damping)
        out = (raw < lo) | (raw > hi)
        if not out.any():
            break
        J[np.repeat(out[:, None, :], J.shape[1], axis=1)] = 0.0
    return np.clip(raw, lo, hi)


def _base_frame_error(de, goal_cur):
    """Residual error (ee relative to goal) as a 6-vector in the base frame."""
    qg = goal_cur[:, 3:]
    return np.concatenate([quat_rotate(qg, de[:, :3]), quat_rotate(qg, quat_to_rotvec(de[:, 3:]))], axis=1)


def _estimate_ee(kind, models, chain, q_meas, ee_mocap):
    if kind == "mocap":
        return ee_mocap
    if kind == "neural":
        if models.fk is None:
            raise ConfigError("neural EE estimator needs a trained FK model")
        return models.fk.predict(q_meas)
    return fk_array(chain, q_meas)


def _estimate_odom(kind, models, leg, y_t, y_0, base_mocap, base_mocap0):
    if kind == "mocap":
        return inv_compose_arrays(base_mocap0, base_mocap)
    if kind == "neural":
        if models.odom is None:
            raise ConfigError("neural base estimator needs a trained odometry model")
        return models.odom.predict(np.concatenate([y_t, y_0], axis=1))
    return analytical_odometry_arrays(leg, y_t, y_0)


def simulate(plant: Plant, goals, models: Estimators | None = None, cfg: EpisodeConfig = EpisodeConfig(),
             trajs=None, meta: dict | None = None, obstacles=(), cmd_noise=None, observer=None):
    """Run one episode per goal row in lockstep on a batched plant.

    ``goals`` is (B, 7) in the base frame at the start of the episode.  The
    plant batch size must equal B.  ``cmd_noise`` (B, horizon, dof) is added
    to the commands before clipping (exploration during data collection).
    ``observer(t, state, mocap_ee, mocap_base)`` is called every tick.
    Returns one RolloutLog per goal.
    """
    models = models or Estimators()
    chain, leg = plant.chain, plant.leg_chain
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    B, T, n = len(goals), cfg.horizon, chain.dof
    st = plant.state
    if st.batch != B:
        raise ValueError("plant batch size must match the number of goals")

    from .planner import plan, plan_batch

    if trajs is None:
        if obstacles:
            trajs = [plan(chain, st.q_measured[b], goals[b], obstacles, cfg.plan) for b in range(B)]
        else:
            trajs = plan_batch(chain, st.q_measured, goals, cfg.plan)
        bad = [b for b, tr in enumerate(trajs) if tr is None]
        if bad:
            raise IkInfeasible(f"no IK solution for goals {bad}")
    trajs = list(trajs)
    plan_start = np.zeros(B, dtype=int)

    rec = {name: np.zeros((B, T, 7)) for name in ("de_est", "de_true", "ee_est", "ee_true", "base_est", "base_true")}
    for name in ("q_cmd", "q_ref", "q_meas"):
        rec[name] = np.zeros((B, T, n))
    for name in ("replan_flag", "adjust_active", "grasp_closed"):
        rec[name] = np.zeros((B, T), dtype=bool)

    odom_plan = np.tile(IDENTITY7, (B, 1))  # estimated odometry when each reference was planned
    y0 = st.y_measured.copy()
    ee_m, base_m0 = plant.mocap(st)
    base_true0 = st.base_true.copy()
    closed = np.zeros(B, dtype=bool)
    frozen = np.zeros((B, n))

    for t in range(T):
        st = plant.state
        ee_m, base_m = plant.mocap(st)
        if observer is not None:
            observer(t, st, ee_m, base_m)
        q = st.q_measured
        ee_est = _estimate_ee(cfg.ee_estimator, models, chain, q, ee_m)
        odom_est = _estimate_odom(cfg.base_estimator, models, leg, st.y_measured, y0, base_m, base_m0)
        odom_true = inv_compose_arrays(base_true0, st.base_true)
        goal_est = current_goal(goals, odom_est)
        de_goal = inv_compose_arrays(ee_est, goal_est)
        de_true = inv_compose_arrays(st.ee_true, current_goal(goals, odom_true))

        if cfg.use_replan and t > 0 and t % cfg.replan_every == 0:
            rec["replan_flag"][:, t] = True
            live = np.flatnonzero(~closed)
            if live.size:
                new = _replan(chain, q[live], goal_est[live], cfg.plan)
                for k, b in enumerate(live):
                    if new[k] is not None:  # keep the old reference when IK fails
                        trajs[b] = new[k]
                        plan_start[b] = t
                        odom_plan[b] = odom_est[b]

        # reference EE pose for this tick, carried from the planning frame to the current one
        k_ref = t - plan_start
        ee_ref = np.array([trajs[b].ee_refs[min(k_ref[b], trajs[b].horizon - 1)] for b in range(B)])
        target = compose_arrays(ee_ref, compose_arrays(inverse_arrays(odom_plan), odom_est))
        de_est = inv_compose_arrays(ee_est, target)

        trans = de_est[:, :3]
        if cfg.use_goal_adjust:
            trans, active = adjust_translation(trans, cfg.goal_adjust)
        else:
            active = np.zeros(B, dtype=bool)
        err_adj = np.concatenate([trans, de_est[:, 3:]], axis=1)

        q_ref = np.array([trajs[b].at(k_ref[b]) for b in range(B)])
        _, _, J = fk_and_jacobian(chain, q)
        e6 = _base_frame_error(err_adj, target)
        cmd = _clamped_command(chain, q_ref, J, e6, cfg.gain, cfg.damping)
        if cmd_noise is not None:
            cmd = chain.clip(cmd + cmd_noise[:, t])

        if cfg.grasp_thresh is not None:
            trigger = ~closed & (np.linalg.norm(de_goal[:, :3], axis=1) <= cfg.grasp_thresh)
            frozen[trigger] = cmd[trigger]
            closed |= trigger
            cmd = np.where(closed[:, None], frozen, cmd)

        for name, val in (("de_est", de_est), ("de_true", de_true), ("ee_est", ee_est), ("ee_true", st.ee_true),
                          ("base_est", odom_est), ("base_true", odom_true), ("q_cmd", cmd), ("q_ref", q_ref),
                          ("q_meas", q)):
            rec[name][:, t] = val
        rec["adjust_active"][:, t] = active
        rec["grasp_closed"][:, t] = closed
        plant.step(cmd)

    meta = dict(meta or {})
    meta.setdefault("episode_config", cfg.digest())
    meta.setdefault("plant_config", plant.cfg.digest())
    meta["chain"] = chain.name
    meta["chain_hash"] = chain.digest()
    meta["lower"] = chain.lower.tolist()
    meta["upper"] = chain.upper.tolist()
    meta["max_vel"] = cfg.plan.max_vel
    meta["dt"] = DT
    logs = []
    for b in range(B):
        m = dict(meta, goal=goals[b].tolist(), episode=int(st.episode_ids[b]))
        logs.append(RolloutLog(np.arange(T), **{k: v[b] for k, v in rec.items()}, meta=m))
    return logs


def _replan(chain, q_now, goals, plan_cfg: PlanConfig):
    from .planner import plan_batch

    return plan_batch(chain, q_now, goals, plan_cfg)


def run_episode(plant: Plant, chain: KinematicChain, models, goal_ee, cfg: EpisodeConfig = EpisodeConfig(),
                obstacles=()) -> RolloutLog:
    """Single-goal episode on ``plant`` (batch size 1), which must use ``chain``."""
    if plant.chain is not chain and plant.chain.digest() != chain.digest():
        raise ValueError("plant was built for a different chain")
    goal = goal_ee.to_array() if isinstance(goal_ee, Pose) else np.asarray(goal_ee, float)
    return simulate(plant, goal[None], models, cfg, obstacles=obstacles)[0]


def run_episodes(chain: KinematicChain, plant_cfg: PlantConfig, goals, models=None,
                 cfg: EpisodeConfig = EpisodeConfig(), leg_chain=None, meta=None, chunk: int = 64):
    """Sweep: one fresh plant episode per goal, episode id = goal index.

    Episodes are independent, so chunking changes nothing in the output.
    """
    goals = np.atleast_2d(np.asarray(goals, float))
    logs = []
    for s in range(0, len(goals), chunk):
        ids = np.arange(s, min(s + chunk, len(goals)))
        plant = Plant(chain, plant_cfg, leg_chain=leg_chain, episode_ids=ids)
        logs += simulate(plant, goals[ids], models, cfg, meta=meta)
    return logs


# ---------------------------------------------------------------------------
# goal sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoalBox:
    lo: tuple = (0.1, -0.5, 0.65)
    hi: tuple = (0.5, 0.5, 1.15)
    yaw_deg: tuple = (-60.0, 60.0)

    def __post_init__(self):
        if np.any(np.asarray(self.lo) >= np.asarray(self.hi)):
            raise ValueError("goal box lo must be below hi on every axis")


def sample_goals(chain: KinematicChain, n: int, seed: int = 0, box: GoalBox = GoalBox(), plan_cfg=PlanConfig(),
                 margin: float = 0.05, max_tries: int = 50):
    """``n`` goal poses (n, 7) drawn uniformly in the box, keeping only IK-feasible ones.

    Orientation is a yaw about the base z axis applied to the hand's home
    orientation.  A goal is kept only if it stays feasible when shifted by
    ``margin`` along each axis, so base sway cannot push it out of reach.
    """
    from .kinematics import solve_ik_many
    from .se3 import quat_from_axis_angle

    rng = np.random.default_rng(seed)
    out = []
    home = np.zeros(chain.dof)
    for _ in range(max_tries):
        k = 2 * (n - len(out)) + 4
        pos = rng.uniform(box.lo, box.hi, size=(k, 3))
        yaw = np.radians(rng.uniform(*box.yaw_deg, size=k))
        cand = np.concatenate([pos, quat_from_axis_angle(np.array([0.0, 0, 1]), yaw)], axis=1)
        shifts = np.vstack([np.zeros(3), margin * np.eye(3), -margin * np.eye(3)]) if margin > 0 else np.zeros((1, 3))
        probe = np.repeat(cand[:, None], len(shifts), axis=1).copy()
        probe[..., :3] += shifts
        probe = probe.reshape(-1, 7)
        _, _, _, conv, _, _ = solve_ik_many(chain, probe, np.tile(chain.clip(home), (len(probe), 1)), plan_cfg.ik)
        out.extend(cand[conv.reshape(k, len(shifts)).all(axis=1)])
        if len(out) >= n:
            return np.array(out[:n])
    raise RuntimeError("could not sample enough feasible goals")


def default_chain():
    return bundled_chain("arm_waist")


__all__ = [
    "GoalAdjustConfig", "adjust_goal", "adjust_translation", "EpisodeConfig", "Estimators", "RolloutLog",
    "simulate", "run_episode", "run_episodes", "GoalBox", "sample_goals", "ConfigError",
    "ReferenceTrajectory", "min_jerk",
]
