import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from residual_reach.chain import bundled_chain

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def arm():
    return bundled_chain("arm_waist")


@pytest.fixture(scope="session")
def leg():
    return bundled_chain("leg")


@pytest.fixture(scope="session")
def planar():
    return bundled_chain("planar2")


def random_poses(rng, n, scale=1.0):
    """(n, 7) poses with scipy-drawn uniform rotations."""
    q = Rotation.random(n, random_state=rng.integers(1 << 31)).as_quat()  # x, y, z, w
    return np.concatenate([rng.normal(scale=scale, size=(n, 3)), q[:, [3, 0, 1, 2]]], axis=1)


def random_joints(chain, rng, n):
    return rng.uniform(chain.lower, chain.upper, size=(n, chain.dof))


@pytest.fixture(scope="session")
def small_dataset(arm):
    """6000 rows on the default plant (24 short episodes)."""
    from residual_reach.control import sample_goals
    from residual_reach.dataset import collect_dataset
    from residual_reach.plant import PlantConfig

    goals = sample_goals(arm, 24, seed=11)
    return collect_dataset(arm, PlantConfig(), goals, 6000, seed=0)


def synthetic_log(final_trans, final_rot_deg, final_joint_err, name="cfg", episode=0, chain_hash="c0ffee",
                  ticks=2, dof=2):
    """Hand-built RolloutLog whose final errors are known exactly.

    The last tick has de_true = x-translation ``final_trans`` with a
    ``final_rot_deg`` turn about z, and q_meas - q_ref = ``final_joint_err``
    on the first joint.
    """
    from residual_reach.control import RolloutLog
    from residual_reach.se3 import IDENTITY7

    half = np.radians(final_rot_deg) / 2
    de = np.tile(IDENTITY7, (ticks, 1))
    de[-1] = [final_trans, 0, 0, np.cos(half), 0, 0, np.sin(half)]
    q_ref = np.zeros((ticks, dof))
    q_meas = np.zeros((ticks, dof))
    q_meas[-1, 0] = final_joint_err
    poses = np.tile(IDENTITY7, (ticks, 1))
    flags = np.zeros(ticks, dtype=bool)
    meta = {"config_name": name, "episode": episode, "chain_hash": chain_hash, "dt": 0.02, "max_vel": 1.0,
            "lower": [-1.0] * dof, "upper": [1.0] * dof, "goal": IDENTITY7.tolist()}
    return RolloutLog(np.arange(ticks), q_meas.copy(), q_ref, q_meas, de.copy(), de, poses, poses.copy(),
                      poses.copy(), poses.copy(), flags, flags.copy(), flags.copy(), meta=meta)


GOLDEN_EVAL = {  # config -> [(trans m, rot deg, joint rad)] per episode
    "alpha": [(0.01, 0.0, 0.5), (0.03, 10.0, 0.1)],
    "beta": [(0.02, 20.0, 0.2), (0.02, 20.0, 0.2)],
    "gamma": [(0.05, 30.0, 0.0), (0.01, 10.0, 0.6)],
}


ACCEPTANCE_LINES: list = []


def report(n: int, ok: bool, detail: str):
    """Record one acceptance line, then fail the test if ``ok`` is false."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
