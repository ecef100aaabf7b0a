"""Least-squares rigid / similarity alignment of corresponded point sets.

Closed-form Kabsch solution with Umeyama's scale estimate.  Used to turn
marker clouds into link poses, but works for any two matched sets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .se3 import Pose


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class Alignment:
    pose: Pose  # maps src into dst: dst ~ scale * R @ src + t
    scale: float
    rmse: float

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.scale * pts @ self.pose.rotation.T + self.pose.t

    def to_dict(self):
        return {"pose": self.pose.to_list(), "scale": self.scale, "rmse": self.rmse}


def _check(src, dst):
    src = check_array(src, dtype=np.float64)
    dst = check_array(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[1] != 3:
        raise DegenerateInput("src and dst must both be (n, 3)")
    if len(src) < 3:
        raise DegenerateInput("need at least 3 correspondences")
    sv = np.linalg.svd(src - src.mean(0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateInput("source points are collinear")
    return src, dst


def kabsch_umeyama(src, dst, with_scale: bool = False) -> Alignment:
    """Transform minimising sum ||s R src_i + t - dst_i||^2 with det(R) = +1."""
    src, dst = _check(src, dst)
    mu_s = src.mean(0)
    mu_d = dst.mean(0)
    X = src - mu_s
    Y = dst - mu_d
    cov = Y.T @ X / len(src)
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    # flip the weakest axis when the best orthogonal fit would be a reflection
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = (U * d) @ Vt
    if with_scale:
        var_s = np.mean(np.sum(X * X, axis=1))
        scale = float(np.sum(S * d) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    resid = scale * src @ R.T + t - dst
    rmse = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return Alignment(Pose.from_rt(R, t), scale, rmse)


class KabschUmeyama(TransformerMixin, BaseEstimator):
    """Estimator form: ``fit(src, dst)`` then ``transform(points)`` maps into the dst frame."""

    def __init__(self, with_scale: bool = False):
        self.with_scale = with_scale

    def fit(self, X, y):
        self.alignment_ = kabsch_umeyama(X, y, self.with_scale)
        self.rotation_ = self.alignment_.pose.rotation
        self.translation_ = self.alignment_.pose.t
        self.scale_ = self.alignment_.scale
        self.rmse_ = self.alignment_.rmse
        return self

    def transform(self, X):
        check_is_fitted(self, "alignment_")
        return self.alignment_.apply(check_array(X, dtype=np.float64))


def read_pairs_csv(text: str):
    """Parse ``src_x,src_y,src_z,dst_x,dst_y,dst_z`` rows (header required)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    need = ["src_x", "src_y", "src_z", "dst_x", "dst_y", "dst_z"]
    if not rows or any(k not in rows[0] for k in need):
        raise ValueError(f"CSV needs columns {need}")
    arr = np.array([[float(r[k]) for k in need] for r in rows])
    return arr[:, :3], arr[:, 3:]
