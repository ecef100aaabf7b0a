import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from residual_reach.kinematics import (IkConfig, fk, fk_and_jacobian, fk_array, jacobian, solve_ik,
                                       solve_ik_many, spread_seeds)
from residual_reach.se3 import Pose, arrays_to_matrices, rotation_errors_deg, translation_errors
from residual_reach.chain import bundled_chain

from conftest import random_joints


def fk_oracle(chain, q):
    """Plain product of 4x4 matrices, joint by joint."""
    M = np.eye(4)
    for j, qi in zip(chain.joints, q):
        M = M @ j.origin.as_matrix()
        step = np.eye(4)
        if j.kind == "prismatic":
            step[:3, 3] = j.axis * qi
        else:
            step[:3, :3] = Rotation.from_rotvec(j.axis * qi).as_matrix()
        M = M @ step
    return M @ chain.ee_offset.as_matrix()


@pytest.mark.parametrize("name", ["arm_waist", "arm_waist_height", "leg"])
def test_fk_matches_matrix_oracle(name):
    c = bundled_chain(name)
    qs = random_joints(c, np.random.default_rng(0), 50)
    got = arrays_to_matrices(fk_array(c, qs))
    for q, M in zip(qs, got):
        np.testing.assert_allclose(M, fk_oracle(c, q), atol=1e-12)


def test_planar_fk_closed_form(planar):
    for a, b in [(0.3, -1.0), (1.2, 2.0), (-2.0, 0.4)]:
        p = fk(planar, [a, b]).t
        np.testing.assert_allclose(p[:2], [0.3 * np.cos(a) + 0.2 * np.cos(a + b),
                                           0.3 * np.sin(a) + 0.2 * np.sin(a + b)], atol=1e-12)


@pytest.mark.parametrize("name", ["arm_waist", "arm_waist_height"])
def test_jacobian_matches_finite_differences(name):
    c = bundled_chain(name)
    rng = np.random.default_rng(1)
    h = 1e-6
    for q in random_joints(c, rng, 5):
        J = jacobian(c, q)
        R0 = fk_oracle(c, q)[:3, :3]
        for i in range(c.dof):
            dq = np.zeros(c.dof)
            dq[i] = h
            Mp, Mm = fk_oracle(c, q + dq), fk_oracle(c, q - dq)
            lin = (Mp[:3, 3] - Mm[:3, 3]) / (2 * h)
            w = Rotation.from_matrix(Mp[:3, :3] @ Mm[:3, :3].T).as_rotvec() / (2 * h)
            np.testing.assert_allclose(J[:3, i], lin, atol=1e-5)
            np.testing.assert_allclose(J[3:, i], w, atol=1e-5)
        R, p, J2 = fk_and_jacobian(c, q)
        np.testing.assert_allclose(R, R0, atol=1e-12)
        np.testing.assert_allclose(J2, J)


def test_batch_shapes(arm):
    q = np.zeros((2, 3, arm.dof))
    assert fk_array(arm, q).shape == (2, 3, 7)
    assert jacobian(arm, q).shape == (2, 3, 6, arm.dof)
    with pytest.raises(ValueError):
        fk_array(arm, np.zeros(3))


def test_ik_recovers_reachable_poses(arm):
    rng = np.random.default_rng(2)
    q_true = random_joints(arm, rng, 40) * 0.6
    targets = fk_array(arm, q_true)
    seeds = np.zeros_like(q_true)
    q, pos, rot, conv, _, _ = solve_ik_many(arm, targets, seeds, IkConfig())
    assert conv.mean() > 0.9
    reached = fk_array(arm, q[conv])
    assert translation_errors(reached, targets[conv]).max() < 1e-4
    assert rotation_errors_deg(reached, targets[conv]).max() < 0.05
    assert np.all(q >= arm.lower - 1e-12) and np.all(q <= arm.upper + 1e-12)


def test_ik_respects_locked_joints(arm):
    lk = arm.locked(["waist_yaw", "waist_roll", "waist_pitch"])
    tgt = fk(arm, np.r_[0, 0, 0, 0.3, 0.2, 0.1, 0.8, 0.1, 0.2, 0.1])
    res = solve_ik(lk, tgt, np.zeros(lk.dof))
    assert res.converged
    np.testing.assert_array_equal(res.q[:3], 0.0)


def test_ik_failure_reports_best_iterate(arm):
    res = solve_ik(arm, Pose([5.0, 0, 1.0]), np.zeros(arm.dof), IkConfig(restarts=1))
    assert not res.converged
    assert res.residual.trans_err > 1.0
    assert np.all(res.q >= arm.lower) and np.all(res.q <= arm.upper)


def test_spread_seeds_nested_and_in_limits(arm):
    s5, s8 = spread_seeds(arm, 5), spread_seeds(arm, 8)
    np.testing.assert_array_equal(s8[:5], s5)
    assert np.all(s8 >= arm.lower) and np.all(s8 <= arm.upper)


def test_single_ik_fast(arm):
    tgt = fk(arm, np.full(arm.dof, 0.2))
    solve_ik(arm, tgt, np.zeros(arm.dof))  # compile
    t = time.perf_counter()
    for _ in range(20):
        solve_ik(arm, tgt, np.zeros(arm.dof))
    assert (time.perf_counter() - t) / 20 < 0.02
