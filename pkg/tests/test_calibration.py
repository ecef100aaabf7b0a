import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from residual_reach.calibration import DegenerateInput, KabschUmeyama, kabsch_umeyama, read_pairs_csv


def _case(seed, n=30, scale=1.0):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-0.5, 0.5, size=(n, 3))
    R = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3)
    return src, scale * src @ R.T + t, R, t


@given(st.integers(0, 10**6))
def test_exact_recovery_noiseless(seed):
    src, dst, R, t = _case(seed)
    al = kabsch_umeyama(src, dst)
    assert np.abs(al.pose.rotation - R).max() < 1e-9
    assert np.abs(al.pose.t - t).max() < 1e-9
    assert al.rmse < 1e-9


@given(st.integers(0, 10**6), st.floats(0.2, 5.0))
def test_scale_recovery(seed, s):
    src, dst, R, _ = _case(seed, scale=s)
    al = kabsch_umeyama(src, dst, with_scale=True)
    assert al.scale == pytest.approx(s, rel=1e-9)
    assert np.abs(al.pose.rotation - R).max() < 1e-9


def test_matches_scipy_align_vectors_with_noise():
    src, dst, _, _ = _case(7, n=200)
    rng = np.random.default_rng(8)
    dst = dst + rng.normal(scale=5e-4, size=dst.shape)
    al = kabsch_umeyama(src, dst)
    sc, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
    np.testing.assert_allclose(al.pose.rotation, sc.as_matrix(), atol=1e-9)


def test_rmse_within_two_sigma():
    sigma = 5e-4
    src, dst, _, _ = _case(3, n=100)
    dst = dst + np.random.default_rng(4).normal(scale=sigma, size=dst.shape)
    assert kabsch_umeyama(src, dst).rmse <= 2 * sigma


def test_planar_points_give_proper_rotation():
    rng = np.random.default_rng(5)
    src = np.c_[rng.uniform(size=(20, 2)), np.zeros(20)]
    R = Rotation.from_euler("xyz", [20, -30, 75], degrees=True).as_matrix()
    al = kabsch_umeyama(src, src @ R.T)
    assert np.linalg.det(al.pose.rotation) == pytest.approx(1.0)
    np.testing.assert_allclose(al.pose.rotation, R, atol=1e-9)
    mirrored = src * [1, 1, -1] @ R.T  # planar set: the mirror image is reachable by a rotation too
    assert np.linalg.det(kabsch_umeyama(src, mirrored).pose.rotation) == pytest.approx(1.0)


def test_reflection_is_never_returned():
    src, _, _, _ = _case(9)
    al = kabsch_umeyama(src, src * [1, 1, -1])
    assert np.linalg.det(al.pose.rotation) == pytest.approx(1.0)
    assert al.rmse > 0.01


@pytest.mark.parametrize("src", [np.zeros((2, 3)), np.c_[np.arange(5.0), np.zeros((5, 2))], np.ones((4, 3))])
def test_degenerate_inputs(src):
    with pytest.raises(DegenerateInput):
        kabsch_umeyama(src, src)


def test_shape_mismatch():
    with pytest.raises(DegenerateInput):
        kabsch_umeyama(np.eye(3), np.eye(4)[:3])
    with pytest.raises(DegenerateInput):
        kabsch_umeyama(np.ones((4, 2)), np.ones((4, 2)))


def test_estimator_api():
    src, dst, _, _ = _case(11)
    est = KabschUmeyama().fit(src, dst)
    np.testing.assert_allclose(est.transform(src), dst, atol=1e-9)
    assert est.get_params() == {"with_scale": False}
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        KabschUmeyama().transform(src)


def test_csv_reader():
    text = "src_x,src_y,src_z,dst_x,dst_y,dst_z\n1,2,3,4,5,6\n0,0,1,1,1,1\n"
    s, d = read_pairs_csv(text)
    np.testing.assert_array_equal(s, [[1, 2, 3], [0, 0, 1]])
    np.testing.assert_array_equal(d, [[4, 5, 6], [1, 1, 1]])
    with pytest.raises(ValueError):
        read_pairs_csv("x,y\n1,2\n")
