import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from residual_reach.kinematics import fk, fk_array
from residual_reach.planner import (Box, IkInfeasible, PlanBlocked, PlanConfig, min_jerk, penetrations, plan,
                                    plan_batch)
from residual_reach.se3 import Pose, translation_errors

GOAL_Q = np.array([0.1, 0.0, 0.05, -0.8, 0.3, 0.2, 1.0, 0.2, 0.1, 0.0])


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.floats(0.2, 3.0))
def test_min_jerk_respects_velocity_and_endpoints(q0, q1, vmax):
    q0, q1 = np.array(q0), np.array(q1)
    path = min_jerk(q0, q1, vmax, 0.02)
    np.testing.assert_array_equal(path[-1], q1)
    steps = np.diff(np.vstack([q0, path]), axis=0)
    assert np.abs(steps).max() <= vmax * 0.02 * (1 + 1e-9) + 1e-12


def test_plan_reaches_goal_with_consistent_refs(arm):
    goal = fk(arm, GOAL_Q)
    tr = plan(arm, np.zeros(arm.dof), goal)
    np.testing.assert_array_equal(tr.ee_refs, fk_array(arm, tr.waypoints))
    assert translation_errors(tr.ee_refs[-1], goal.to_array()) < 1e-4
    assert np.all(tr.waypoints >= arm.lower) and np.all(tr.waypoints <= arm.upper)
    np.testing.assert_array_equal(tr.at(10**6), tr.waypoints[-1])
    np.testing.assert_array_equal(tr.at(-3), tr.waypoints[0])


def test_plan_errors(arm):
    with pytest.raises(IkInfeasible):
        plan(arm, np.zeros(arm.dof), Pose([3.0, 0.0, 1.0]))
    bad = np.zeros(arm.dof)
    bad[0] = 10.0
    with pytest.raises(ValueError):
        plan(arm, bad, fk(arm, GOAL_Q))
    goal = fk(arm, GOAL_Q)
    with pytest.raises(PlanBlocked):
        plan(arm, np.zeros(arm.dof), goal, [Box(tuple(goal.t - 0.05), tuple(goal.t + 0.05))])
    with pytest.raises(ValueError):
        Box((0, 0, 0), (0, 1, 1))


def test_detour_avoids_obstacle(arm):
    goal = fk(arm, GOAL_Q)
    straight = plan(arm, np.zeros(arm.dof), goal)
    pts = fk_array(arm, straight.waypoints)[:, :3]
    mid = pts[len(pts) // 2]
    box = Box(tuple(mid - 0.03), tuple(mid + 0.03))
    assert penetrations(arm, straight.waypoints, [box]) > 0
    tr = plan(arm, np.zeros(arm.dof), goal, [box])
    assert tr.via is not None
    assert penetrations(arm, tr.waypoints, [box]) == 0
    assert translation_errors(tr.ee_refs[-1], goal.to_array()) < 1e-4


def test_plan_batch_marks_failures(arm):
    goals = np.stack([fk(arm, GOAL_Q).to_array(), Pose([3.0, 0, 1.0]).to_array()])
    out = plan_batch(arm, np.zeros((2, arm.dof)), goals, PlanConfig())
    assert out[0] is not None and out[1] is None


def test_replan_under_20ms(arm):
    goal = fk(arm, GOAL_Q)
    q_now = GOAL_Q * 0.5
    plan(arm, q_now, goal)
    t = time.perf_counter()
    for _ in range(20):
        plan(arm, q_now, goal)
    assert (time.perf_counter() - t) / 20 < 0.020
