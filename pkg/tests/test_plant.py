import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from residual_reach.kinematics import chain_frames, fk_array
from residual_reach.plant import (LEG_NOMINAL, UPPER_BODY_LOAD, LimitViolation, Plant, PlantConfig,
                                  analytical_fk_error, analytical_odometry_error, gravity_load, initial_state,
                                  mocap_read, plant_step, sample_box_configs)
from residual_reach.se3 import translation_errors

from conftest import random_joints


def potential(chain, q, extra=None):
    """Gravity potential of the unit-density point masses used by the load model."""
    R, p, _, origins = chain_frames(chain, q)
    lengths = [np.linalg.norm(j.origin.t) for j in chain.joints[1:]] + [np.linalg.norm(chain.ee_offset.t)]
    z = np.append(origins[1:, 2], p[2])
    U = float(np.dot(lengths, z))
    if extra is not None:
        off, m = extra
        U += m * (p + R @ np.asarray(off))[2]
    return U


@pytest.mark.parametrize("which", ["arm", "leg"])
def test_gravity_load_is_minus_potential_gradient(which, arm, leg):
    chain, extra = (arm, None) if which == "arm" else (leg, UPPER_BODY_LOAD)
    rng = np.random.default_rng(0)
    for q in random_joints(chain, rng, 5):
        load = gravity_load(chain, q[None], extra)[0]
        h = 1e-6
        for i in range(chain.dof):
            dq = np.zeros(chain.dof)
            dq[i] = h
            g = (potential(chain, q + dq, extra) - potential(chain, q - dq, extra)) / (2 * h)
            assert load[i] == pytest.approx(-g, abs=1e-6)


def test_ideal_plant_matches_analytical_model(arm, leg):
    cfg = PlantConfig.ideal(sway_amplitude=0.0, mocap_noise_sigma=0.0, mocap_rot_sigma=0.0)
    p = Plant(arm, cfg, batch=3)
    q = random_joints(arm, np.random.default_rng(1), 3) * 0.5
    for _ in range(60):
        st = p.step(q)
    np.testing.assert_allclose(st.q_true, st.q_measured)
    np.testing.assert_allclose(st.ee_true, fk_array(arm, st.q_measured), atol=1e-12)
    np.testing.assert_allclose(st.base_true, fk_array(leg, st.y_measured), atol=1e-12)
    ee, base = p.mocap()
    np.testing.assert_array_equal(ee, st.ee_true)


def test_first_order_lag(arm):
    cfg = PlantConfig(lag=0.2)
    p = Plant(arm, cfg)
    cmd = np.full(arm.dof, 0.1)
    st = p.step(cmd)
    np.testing.assert_allclose(st.q_measured[0], 0.02)
    st = p.step(cmd)
    np.testing.assert_allclose(st.q_measured[0], 0.02 + 0.2 * 0.08)
    assert st.t == 2


def test_command_limits(arm):
    p = Plant(arm)
    bad = np.zeros(arm.dof)
    bad[0] = arm.upper[0] + 0.1
    with pytest.raises(LimitViolation):
        p.step(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        PlantConfig(lag=0.0)
    with pytest.raises(ValueError):
        PlantConfig(mocap_noise_sigma=-1.0)
    with pytest.raises(ValueError):
        PlantConfig(sway_gain=float("nan"))
    assert PlantConfig().digest() != PlantConfig(seed=1).digest()


def test_pure_step_leaves_state_untouched(arm):
    cfg = PlantConfig()
    s0 = initial_state(cfg, arm, batch=2)
    keep = s0.copy()
    s1 = plant_step(s0, np.full(arm.dof, 0.05), cfg, arm)
    np.testing.assert_array_equal(s0.q_measured, keep.q_measured)
    assert s1.t == 1
    e1, _ = mocap_read(s1, cfg, arm)
    e2, _ = mocap_read(s1, cfg, arm)
    np.testing.assert_array_equal(e1, e2)


@given(st.lists(st.integers(0, 20), min_size=1, max_size=5, unique=True))
def test_episode_stream_independent_of_batch(ids):
    from residual_reach.chain import bundled_chain

    arm = bundled_chain("arm_waist")
    cmd = np.full(arm.dof, 0.1)
    together = Plant(arm, episode_ids=ids)
    for _ in range(5):
        together.step(cmd)
    ee_all, base_all = together.mocap()
    for k, e in enumerate(ids):
        alone = Plant(arm, episode_ids=[e])
        for _ in range(5):
            alone.step(cmd)
        ee, base = alone.mocap()
        np.testing.assert_array_equal(ee[0], ee_all[k])
        np.testing.assert_array_equal(base[0], base_all[k])


def test_mocap_noise_magnitude(arm):
    cfg = PlantConfig(mocap_noise_sigma=1e-3)
    p = Plant(arm, cfg, batch=200)
    ee, _ = p.mocap()
    d = ee[:, :3] - p.state.ee_true[:, :3]
    assert np.std(d) == pytest.approx(1e-3, rel=0.15)


def test_default_error_calibration(arm):
    """Frozen scales reproduce the target mean errors (1.76 cm FK, 1.1 cm odometry)."""
    qs = sample_box_configs(arm, 300, seed=0)
    fk_err = analytical_fk_error(arm, PlantConfig(), qs)
    odo_err = analytical_odometry_error(arm, PlantConfig(), qs)
    assert fk_err == pytest.approx(0.0176, abs=5e-4)
    assert odo_err == pytest.approx(0.011, abs=5e-4)
    assert 0.010 <= fk_err <= 0.025


def test_error_grows_with_reach(arm):
    p = Plant(arm, PlantConfig(), batch=2)
    q = np.zeros((2, arm.dof))
    q[1, 3] = -1.4  # shoulder pitch forward: arm out in front
    for _ in range(80):
        st = p.step(q)
    err = translation_errors(st.ee_true, fk_array(arm, st.q_measured))
    assert err[1] > err[0]


def test_leg_stance_near_nominal(arm):
    p = Plant(arm, PlantConfig.ideal(sway_amplitude=0.0))
    np.testing.assert_allclose(p.state.y_measured[0], LEG_NOMINAL, atol=1e-12)
