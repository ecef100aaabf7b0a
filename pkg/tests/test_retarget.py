import math
import warnings

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from residual_reach.retarget import (AlreadyRetargeted, GraspCandidate, NoFeasibleGrasp, SceneContext, clip_yaw,
                                     dumps_grasps, elevation_deg, filter_grasps, loads_grasps, matrix_from_zyx,
                                     retarget_candidate, retarget_to_hand, zyx_from_matrix)
from residual_reach.se3 import Pose


def grasp(yaw=0.0, pitch=0.0, roll=0.0, t=(0.3, 0.2, 0.8), conf=0.9):
    R = Rotation.from_euler("ZYX", [yaw, pitch, roll], degrees=True).as_matrix()
    return GraspCandidate(Pose.from_rt(R, t), conf, 0.05)


def yaw_deg(p):
    return math.degrees(zyx_from_matrix(p.rotation)[0])


@pytest.mark.parametrize("yaw_in,yaw_out", [(0.0, 45.0), (45.0, 70.0), (10.0, 55.0)])
def test_spec_examples(yaw_in, yaw_out):
    assert yaw_deg(retarget_to_hand(grasp(yaw_in))) == pytest.approx(yaw_out, abs=1e-9)


def test_offset_is_about_grasp_z_against_scipy():
    g = grasp(20, 35, -15)
    out = retarget_to_hand(g, yaw_limit_deg=180)
    expect = g.pose.rotation @ Rotation.from_euler("z", 45, degrees=True).as_matrix()
    np.testing.assert_allclose(out.rotation, expect, atol=1e-12)
    np.testing.assert_array_equal(out.t, g.pose.t)
    base = retarget_to_hand(g, local=False, yaw_limit_deg=180)
    np.testing.assert_allclose(base.rotation, Rotation.from_euler("z", 45, degrees=True).as_matrix() @ g.pose.rotation,
                               atol=1e-12)


def test_clip_keeps_pitch_and_roll():
    p = grasp(100, 20, 10).pose
    c = clip_yaw(p, 70)
    y, pi, r = zyx_from_matrix(c.rotation)
    assert math.degrees(y) == pytest.approx(70)
    assert math.degrees(pi) == pytest.approx(20)
    assert math.degrees(r) == pytest.approx(10)
    assert yaw_deg(clip_yaw(grasp(-120).pose)) == pytest.approx(-70)


def test_zyx_roundtrip_against_scipy():
    for ang in [(10, 20, 30), (-170, 80, -5), (0, -45, 179)]:
        R = Rotation.from_euler("ZYX", ang, degrees=True).as_matrix()
        np.testing.assert_allclose(np.degrees(zyx_from_matrix(R)), ang, atol=1e-9)
        np.testing.assert_allclose(matrix_from_zyx(*np.radians(ang)), R, atol=1e-12)


def test_gimbal_lock_bypass_warns():
    p = grasp(100, 89.5, 0).pose
    with pytest.warns(RuntimeWarning):
        out = clip_yaw(p)
    assert out is p
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        clip_yaw(grasp(100, 85, 0).pose)


def test_double_retarget_refused():
    g = retarget_candidate(grasp())
    assert g.retargeted
    with pytest.raises(AlreadyRetargeted):
        retarget_to_hand(g)


def test_filter_side_height_and_order():
    ctx = SceneContext(table_height=0.7, object_height_band=(0.05, 0.2), hand_side="left")
    # hand at y=0.15; objects at y=0.2 are further left, so approach y must not point back (negative)
    flat_lo = grasp(0, 0, 0, t=(0.3, 0.2, 0.8), conf=0.5)
    flat_hi = grasp(0, 0, 0, t=(0.3, 0.2, 0.8), conf=0.9)
    steep = grasp(0, 60, 0, t=(0.3, 0.2, 0.8), conf=1.0)
    far_side = grasp(-90, 0, 0, t=(0.3, 0.2, 0.8))  # approach -y, back toward the hand side
    too_high = grasp(0, 0, 0, t=(0.3, 0.2, 1.2))
    kept = filter_grasps([steep, flat_lo, far_side, flat_hi, too_high], ctx)
    assert kept == [flat_hi, flat_lo, steep]
    with pytest.raises(NoFeasibleGrasp):
        filter_grasps([too_high], ctx)


def test_candidate_validation_and_io():
    with pytest.raises(ValueError):
        GraspCandidate(Pose(), 1.5, 0.05)
    with pytest.raises(ValueError):
        GraspCandidate(Pose(), 0.5, 0.0)
    with pytest.raises(ValueError):
        SceneContext(0.7, (0.2, 0.1))
    gs = [grasp(10), retarget_candidate(grasp(30))]
    for text in (dumps_grasps(gs), dumps_grasps(gs, {"seed": 0})):
        back = loads_grasps(text)
        assert [b.retargeted for b in back] == [False, True]
        assert back[0].pose.allclose(gs[0].pose, atol=1e-12)
    assert elevation_deg([1, 0, 1]) == pytest.approx(45)
