import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from residual_reach.kinematics import fk_array
from residual_reach.workspace import (dumps_workspace, estimate_workspace, grid_shape, loads_workspace,
                                      reach_sphere, rle_decode, rle_encode, summary_csv)

from conftest import random_joints


@given(st.lists(st.booleans(), max_size=300))
def test_rle_roundtrip(bits):
    bits = np.array(bits, dtype=bool)
    runs = rle_encode(bits)
    assert sum(runs) == len(bits)
    np.testing.assert_array_equal(rle_decode(runs, len(bits)), bits)


def test_rle_size_mismatch():
    with pytest.raises(ValueError):
        rle_decode([2, 3], 6)


def test_planar_annulus_area(planar):
    ws = estimate_workspace(planar, [-0.6, -0.6, -0.01], [0.6, 0.6, 0.01], 0.02)
    area = ws.count * ws.resolution**2
    exact = np.pi * (0.5**2 - 0.1**2)
    assert abs(area - exact) / exact < 0.15
    c = ws.centers()[ws.reachable.ravel()]
    r = np.linalg.norm(c[:, :2], axis=1)
    assert r.min() > 0.1 - 0.03 and r.max() < 0.5 + 0.03


def test_reach_sphere_contains_samples(arm):
    center, radius = reach_sphere(arm)
    p = fk_array(arm, random_joints(arm, np.random.default_rng(0), 2000))[:, :3]
    assert np.linalg.norm(p - center, axis=1).max() <= radius + 1e-9


def test_coarse_superset_and_roundtrip(arm):
    lo, hi = [-0.1, -0.3, 0.5], [0.7, 0.7, 1.3]
    free = estimate_workspace(arm, lo, hi, 0.1, name="unlocked")
    lk = estimate_workspace(arm.locked(["waist_yaw", "waist_roll", "waist_pitch"]), lo, hi, 0.1, name="locked")
    assert free.issuperset(lk) and free.volume > lk.volume
    back = loads_workspace(dumps_workspace(free, {"seed": 0}))
    np.testing.assert_array_equal(back.reachable, free.reachable)
    assert back.volume == pytest.approx(free.volume)
    rows = summary_csv([free, lk]).splitlines()
    assert rows[0] == "config_name,N_reach,volume_m3"
    assert rows[1].startswith(f"unlocked,{free.count},")


def test_bad_bounds(planar):
    with pytest.raises(ValueError):
        estimate_workspace(planar, [0, 0, 0], [0, 1, 1], 0.1)
    with pytest.raises(ValueError):
        estimate_workspace(planar, [0, 0, 0], [1, 1, 1], 0.0)
    assert grid_shape([0, 0, 0], [1, 0.5, 0.02], 0.02) == (50, 25, 1)
