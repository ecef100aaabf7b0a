"""Simulated robot with systematic hardware error and motion-capture readout.

The encoders report ``q_measured``; the links actually sit at ``q_true``,
which adds a constant joint bias and a gravity-load dependent elastic
deflection.  Link lengths are also slightly off.  The base stands on a leg
whose joints react to the arm's reach (balance) and to a slow sway, and the
leg carries the same kinds of error.  Everything is a deterministic function
of the measured joints, so a learned model can in principle remove it.

State arrays carry a leading batch axis so many episodes step together.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .chain import KinematicChain, bundled_chain
from .kinematics import chain_frames, fk_array
from .se3 import quat_from_rotvec, quat_mul, quat_normalize

DT = 1.0 / 50.0

# Unit error profiles; the defaults below are these times a calibrated scale.
ARM_BIAS_PROFILE = np.array([0.004, -0.006, 0.008, -0.010, 0.007, 0.005, -0.012, 0.006, -0.008, 0.004])
ARM_ELASTICITY_PROFILE = np.array([0.0, 0.06, 0.08, 0.10, 0.07, 0.03, 0.10, 0.02, 0.05, 0.0])
ARM_LINK_PROFILE = np.array([0.010, 0.0, 0.0, -0.015, 0.020, 0.015, -0.020, 0.025, -0.015, 0.0, 0.020])
LEG_BIAS_PROFILE = np.array([0.003, -0.004, 0.006, -0.005, 0.004, 0.002])
LEG_ELASTICITY_PROFILE = np.array([0.30, 0.50, 0.40, 0.30, 0.25, 0.0])
LEG_LINK_PROFILE = np.array([0.02, 0.0, 0.03, -0.03, 0.0, 0.0, 0.03])

# Frozen output of calibrate_error_scale() for the bundled chains; see
# tests/test_plant.py::test_default_scales_match_calibration.
ARM_ERROR_SCALE = 1.9576
LEG_ERROR_SCALE = 0.4798

LEG_NOMINAL = np.array([0.0, 0.25, -0.5, 0.25, 0.0, 0.0])
LEG_LENGTH = 0.68
ANKLE_ROLL, ANKLE_PITCH, KNEE, HIP_PITCH, HIP_ROLL, HIP_YAW = range(6)


class LimitViolation(ValueError):
    pass


@dataclass(frozen=True)
class PlantConfig:
    elasticity: tuple = tuple(ARM_ELASTICITY_PROFILE * ARM_ERROR_SCALE)
    joint_bias: tuple = tuple(ARM_BIAS_PROFILE * ARM_ERROR_SCALE)
    link_scale: tuple = tuple(1.0 + ARM_LINK_PROFILE * ARM_ERROR_SCALE)
    leg_elasticity: tuple = tuple(LEG_ELASTICITY_PROFILE * LEG_ERROR_SCALE)
    leg_bias: tuple = tuple(LEG_BIAS_PROFILE * LEG_ERROR_SCALE)
    leg_link_scale: tuple = tuple(1.0 + LEG_LINK_PROFILE * LEG_ERROR_SCALE)
    mocap_noise_sigma: float = 2e-4  # m
    mocap_rot_sigma: float = 1e-3  # rad
    sway_amplitude: float = 0.004  # m, slow sinusoidal base sway
    sway_period: float = 9.0  # s
    sway_gain: float = 0.08  # base displacement per metre of reach
    lag: float = 0.2
    leg_lag: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lag <= 1.0 or not 0.0 < self.leg_lag <= 1.0:
            raise ValueError("lag must lie in (0, 1]")
        if self.mocap_noise_sigma < 0 or self.mocap_rot_sigma < 0:
            raise ValueError("mocap noise must be non-negative")
        vals = [self.sway_amplitude, self.sway_gain, self.sway_period]
        vals += list(self.elasticity) + list(self.leg_elasticity)
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite plant parameter")

    @classmethod
    def ideal(cls, **kw) -> "PlantConfig":
        """No injected error at all: the plant is the analytical model."""
        base = dict(
            elasticity=(0.0,) * 10, joint_bias=(0.0,) * 10, link_scale=(1.0,) * 11,
            leg_elasticity=(0.0,) * 6, leg_bias=(0.0,) * 6, leg_link_scale=(1.0,) * 7,
        )
        base.update(kw)
        return cls(**base)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PlantState:
    q_commanded: np.ndarray  # (B, dof)
    q_measured: np.ndarray
    q_true: np.ndarray
    y_measured: np.ndarray  # (B, 6) leg encoders
    y_true: np.ndarray
    ee_true: np.ndarray  # (B, 7) in the base frame
    base_true: np.ndarray  # (B, 7) in the world (ankle) frame
    t: int = 0
    episode_ids: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=int))

    @property
    def batch(self) -> int:
        return self.q_measured.shape[0]

    def copy(self) -> "PlantState":
        return PlantState(*(np.array(getattr(self, f)) for f in (
            "q_commanded", "q_measured", "q_true", "y_measured", "y_true", "ee_true", "base_true")),
            t=self.t, episode_ids=self.episode_ids.copy())


# ---------------------------------------------------------------------------
# error model
# ---------------------------------------------------------------------------

def gravity_load(chain: KinematicChain, q, extra_mass=None):
    """Gravity-moment surrogate per joint, shape (B, dof).

    Each joint carries the torque of unit-density links hanging beyond it:
    point masses equal to link length sit at every distal joint origin and at
    the end effector.  ``extra_mass`` = (offset in EE frame, mass) adds a
    lumped load such as the upper body on a leg.
    """
    R, p, axes, origins = chain_frames(chain, q)
    n = chain.dof
    lengths = [float(np.linalg.norm(j.origin.t)) for j in chain.joints[1:]]
    lengths.append(float(np.linalg.norm(chain.ee_offset.t)))
    pts = np.concatenate([origins[..., 1:, :], p[..., None, :]], axis=-2)  # (B, n, 3)
    masses = np.asarray(lengths)
    if extra_mass is not None:
        off, m = extra_mass
        com = p + R @ np.asarray(off, dtype=float)
        pts = np.concatenate([pts, com[..., None, :]], axis=-2)
        masses = np.append(masses, m)
    load = np.zeros(q.shape[:-1] + (n,))
    for i in range(n):
        v = pts[..., i:, :] - origins[..., i:i + 1, :]
        # torque of -z gravity about the joint axis: a . (v x -z) = -a_x v_y + a_y v_x
        a = axes[..., i:i + 1, :]
        tau = -a[..., 0] * v[..., 1] + a[..., 1] * v[..., 0]
        load[..., i] = np.sum(tau * masses[i:], axis=-1)
    return load


UPPER_BODY_LOAD = ((0.0, 0.0, 1.0), 3.0)


class Plant:
    """Stateful wrapper used by the control loop and data collection."""

    def __init__(self, chain: KinematicChain, cfg: PlantConfig = PlantConfig(),
                 leg_chain: KinematicChain | None = None, batch: int = 1, episode_ids=None,
                 q0=None):
        self.chain = chain
        self.leg_chain = leg_chain if leg_chain is not None else bundled_chain("leg")
        self.cfg = cfg
        self.true_chain = chain.scaled(cfg.link_scale)
        self.true_leg = self.leg_chain.scaled(cfg.leg_link_scale)
        ids = np.arange(batch) if episode_ids is None else np.asarray(episode_ids, dtype=int)
        self._home_xy = fk_array(chain, np.zeros(chain.dof))[:2]
        self._leg_load0 = gravity_load(self.leg_chain, LEG_NOMINAL, extra_mass=UPPER_BODY_LOAD)
        self._noise_cache = {}
        rng = np.random.default_rng([cfg.seed, 7919])
        self._phase_seed = rng.integers(0, 2**31)
        self.state = self.initial_state(ids, q0)

    # -- state construction -------------------------------------------------

    def initial_state(self, episode_ids, q0=None) -> PlantState:
        b = len(episode_ids)
        q = np.zeros((b, self.chain.dof)) if q0 is None else np.broadcast_to(q0, (b, self.chain.dof)).astype(float)
        st = PlantState(q.copy(), q.copy(), q.copy(), np.tile(LEG_NOMINAL, (b, 1)), np.tile(LEG_NOMINAL, (b, 1)),
                        np.zeros((b, 7)), np.zeros((b, 7)), 0, np.asarray(episode_ids, dtype=int))
        self._settle(st)
        return st

    def _settle(self, st: PlantState):
        st.q_true = self.true_joints(st.q_measured)
        st.ee_true = fk_array(self.true_chain, st.q_true)
        st.y_measured = self.leg_target(st)
        st.y_true = self.true_leg_joints(st.y_measured)
        st.base_true = fk_array(self.true_leg, st.y_true)

    def true_joints(self, q_meas):
        cfg = self.cfg
        load = gravity_load(self.chain, q_meas)
        return q_meas + np.asarray(cfg.joint_bias) + np.asarray(cfg.elasticity) * load

    def true_leg_joints(self, y_meas):
        cfg = self.cfg
        # deflection relative to the nominal stance, whose static sag is absorbed in the bias
        load = gravity_load(self.leg_chain, y_meas, extra_mass=UPPER_BODY_LOAD) - self._leg_load0
        d = np.asarray(cfg.leg_bias) + np.asarray(cfg.leg_elasticity) * load
        # the balance controller holds the torso upright from the IMU, so the
        # hips absorb the summed pitch/roll deflection: the error is a shift, not a tilt
        d = np.array(d, dtype=float)
        d[..., HIP_PITCH] = -(d[..., ANKLE_PITCH] + d[..., KNEE])
        d[..., HIP_ROLL] = -d[..., ANKLE_ROLL]
        return y_meas + d

    def _phases(self, ids):
        rng = np.random.default_rng([int(self._phase_seed)])
        table = rng.uniform(0, 2 * np.pi, size=(int(ids.max()) + 1, 2))
        return table[ids]

    def leg_target(self, st: PlantState):
        """Balance posture: hips shift against the arm's reach, plus a slow sway."""
        cfg = self.cfg
        ext = st.ee_true[:, :2] - self._home_xy
        y = np.tile(LEG_NOMINAL, (st.batch, 1))
        dx = cfg.sway_gain * ext[:, 0] / LEG_LENGTH
        dy = cfg.sway_gain * ext[:, 1] / LEG_LENGTH
        y[:, ANKLE_PITCH] -= dx
        y[:, HIP_PITCH] += dx
        y[:, ANKLE_ROLL] += dy
        y[:, HIP_ROLL] -= dy
        ph = self._phases(st.episode_ids)
        w = 2 * np.pi * st.t * DT / cfg.sway_period
        amp = cfg.sway_amplitude / LEG_LENGTH
        y[:, ANKLE_PITCH] += amp * np.sin(w + ph[:, 0])
        y[:, ANKLE_ROLL] += 0.5 * amp * np.sin(0.7 * w + ph[:, 1])
        return self.leg_chain.clip(y)

    # -- dynamics -------------------------------------------------------------

    def step(self, cmd) -> PlantState:
        self.state = plant_step_impl(self, self.state, cmd)
        return self.state

    def mocap(self, state: PlantState | None = None):
        return mocap_read_impl(self, self.state if state is None else state)

    def noise(self, episode_ids, t):
        """Per-episode standard-normal draws (B, 12) for tick ``t``.

        Generated in 1024-tick blocks seeded by (seed, episode, block), so a
        read depends only on those and the tick, not on batch layout.
        """
        block, off = divmod(int(t), 1024)
        out = np.empty((len(episode_ids), 12))
        for k, e in enumerate(episode_ids):
            key = (int(e), block)
            tab = self._noise_cache.get(key)
            if tab is None:
                if len(self._noise_cache) > 4096:
                    self._noise_cache.clear()
                tab = np.random.default_rng([self.cfg.seed, int(e), block, 1]).standard_normal((1024, 12))
                self._noise_cache[key] = tab
            out[k] = tab[off]
        return out


def plant_step_impl(plant: Plant, st: PlantState, cmd) -> PlantState:
    chain = plant.chain
    cmd = np.broadcast_to(np.asarray(cmd, dtype=float), st.q_measured.shape)
    lo, hi = chain.lower, chain.upper
    if np.any(cmd < lo - 1e-12) or np.any(cmd > hi + 1e-12):
        raise LimitViolation("command outside joint limits")
    cfg = plant.cfg
    new = PlantState(
        cmd.copy(),
        st.q_measured + cfg.lag * (cmd - st.q_measured),
        st.q_true, st.y_measured, st.y_true, st.ee_true, st.base_true,
        st.t + 1, st.episode_ids,
    )
    new.q_true = plant.true_joints(new.q_measured)
    new.ee_true = fk_array(plant.true_chain, new.q_true)
    target = plant.leg_target(new)
    new.y_measured = st.y_measured + cfg.leg_lag * (target - st.y_measured)
    new.y_true = plant.true_leg_joints(new.y_measured)
    new.base_true = fk_array(plant.true_leg, new.y_true)
    return new


def _noisy(pose, n_t, n_r, sigma, rot_sigma):
    t = pose[..., :3] + sigma * n_t
    dq = quat_from_rotvec(rot_sigma * n_r)
    q = quat_normalize(quat_mul(dq, pose[..., 3:]))
    return np.concatenate([t, q], axis=-1)


def mocap_read_impl(plant: Plant, st: PlantState):
    """Noisy ground truth ``(ee_in_base, base_in_world)``, each (B, 7)."""
    cfg = plant.cfg
    if cfg.mocap_noise_sigma == 0.0 and cfg.mocap_rot_sigma == 0.0:
        return st.ee_true.copy(), st.base_true.copy()
    z = plant.noise(st.episode_ids, st.t)
    ee = _noisy(st.ee_true, z[:, 0:3], z[:, 3:6], cfg.mocap_noise_sigma, cfg.mocap_rot_sigma)
    base = _noisy(st.base_true, z[:, 6:9], z[:, 9:12], cfg.mocap_noise_sigma, cfg.mocap_rot_sigma)
    return ee, base


_PLANTS: dict = {}


def _plant_for(cfg: PlantConfig, chain: KinematicChain, leg_chain=None) -> Plant:
    key = (cfg, id(chain), id(leg_chain))
    p = _PLANTS.get(key)
    if p is None:
        if len(_PLANTS) > 32:
            _PLANTS.clear()
        p = Plant(chain, cfg, leg_chain)
        _PLANTS[key] = p
    return p


def plant_step(state: PlantState, cmd, cfg: PlantConfig, chain: KinematicChain, leg_chain=None) -> PlantState:
    """Pure form of :meth:`Plant.step`: returns the next state, ``state`` is untouched."""
    return plant_step_impl(_plant_for(cfg, chain, leg_chain), state, cmd)


def mocap_read(state: PlantState, cfg: PlantConfig, chain: KinematicChain, leg_chain=None):
    return mocap_read_impl(_plant_for(cfg, chain, leg_chain), state)


def initial_state(cfg: PlantConfig, chain: KinematicChain, leg_chain=None, batch=1) -> PlantState:
    return _plant_for(cfg, chain, leg_chain).initial_state(np.arange(batch))


# ---------------------------------------------------------------------------
# calibration of the default error magnitudes
# ---------------------------------------------------------------------------

TARGET_BOX_LO = np.array([0.1, -0.5, 0.65])
TARGET_BOX_HI = np.array([0.5, 0.5, 1.15])


def sample_box_configs(chain: KinematicChain, n=300, seed=0, lo=TARGET_BOX_LO, hi=TARGET_BOX_HI,
                       yaw_deg=60.0):
    """Joint configurations reaching random poses in the target box.

    Poses whose IK does not converge are dropped.
    """
    from .kinematics import IkConfig, solve_ik_many
    from .se3 import quat_from_axis_angle

    rng = np.random.default_rng(seed)
    pos = rng.uniform(lo, hi, size=(n, 3))
    yaw = np.radians(rng.uniform(-yaw_deg, yaw_deg, size=n))
    quat = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    targets = np.concatenate([pos, quat], axis=1)
    q, _, _, conv, _, _ = solve_ik_many(chain, targets, np.zeros((n, chain.dof)), IkConfig(pos_tol=1e-3, rot_tol=0.5))
    return q[conv]


def analytical_fk_error(chain, cfg: PlantConfig, qs) -> float:
    """Mean translation gap between the true EE and FK of the encoder reading."""
    plant = Plant(chain, cfg, batch=1)
    true = fk_array(plant.true_chain, plant.true_joints(qs))
    return float(np.mean(np.linalg.norm(true[:, :3] - fk_array(chain, qs)[:, :3], axis=1)))


def analytical_odometry_error(chain, cfg: PlantConfig, qs) -> float:
    """Mean translation error of leg-FK odometry between home and each reach posture."""
    from .se3 import inv_compose_arrays

    plant = Plant(chain, cfg, batch=len(qs))
    st0 = plant.initial_state(np.arange(len(qs)))
    st = st0.copy()
    st.q_measured = qs
    st.t = int(plant.cfg.sway_period / DT / 4)
    plant._settle(st)
    leg = plant.leg_chain
    odo_fk = inv_compose_arrays(fk_array(leg, st0.y_measured), fk_array(leg, st.y_measured))
    odo_true = inv_compose_arrays(st0.base_true, st.base_true)
    return float(np.mean(np.linalg.norm(odo_fk[:, :3] - odo_true[:, :3], axis=1)))


def calibrate_error_scale(chain=None, target_ee=0.0176, target_odom=0.011, n=300, seed=0):
    """Scale factors on the unit error profiles that hit the target mean errors.

    Returns ``(arm_scale, leg_scale)``.  Targets default to the analytical-FK
    end-effector (1.76 cm) and odometry (1.10 cm) error levels seen on real
    hardware.  Solved by bisection; both errors grow monotonically in scale
    over the bracket used.
    """
    chain = chain if chain is not None else bundled_chain("arm_waist")
    qs = sample_box_configs(chain, n=n, seed=seed)

    def arm_cfg(s):
        return PlantConfig.ideal(
            elasticity=tuple(ARM_ELASTICITY_PROFILE * s), joint_bias=tuple(ARM_BIAS_PROFILE * s),
            link_scale=tuple(1.0 + ARM_LINK_PROFILE * s))

    def leg_cfg(s):
        return replace(
            PlantConfig.ideal(), leg_elasticity=tuple(LEG_ELASTICITY_PROFILE * s),
            leg_bias=tuple(LEG_BIAS_PROFILE * s), leg_link_scale=tuple(1.0 + LEG_LINK_PROFILE * s))

    def bisect(fn, target):
        lo, hi = 0.0, 10.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if fn(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    arm = bisect(lambda s: analytical_fk_error(chain, arm_cfg(s), qs), target_ee)
    leg = bisect(lambda s: analytical_odometry_error(chain, leg_cfg(s), qs), target_odom)
    return arm, leg
