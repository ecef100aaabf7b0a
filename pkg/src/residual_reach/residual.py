"""Learned residual corrections for end-effector FK and leg odometry.

Both estimators follow the scikit-learn estimator protocol.  A fitted model
predicts a correction pose that is composed onto the analytical estimate::

    corrected = compose(analytical, residual)

so an untrained model (zero head weights) reproduces the analytical result
exactly.  Setting ``residual=False`` gives the ablation that regresses the
absolute pose from the same inputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .chain import KinematicChain, bundled_chain
from .kinematics import fk_array, fk_rt
from .mlp import Mlp, NonFiniteLoss, architecture_hash, fit_mlp
from .se3 import (
    ROT6D_IDENTITY,
    Pose,
    compose_arrays,
    inv_compose_arrays,
    inverse_arrays,
    matrices_to_arrays,
    quat_to_matrix,
    rot6d_from_matrix,
    safe_matrix_from_rot6d,
    translation_errors,
)

__all__ = [
    "ResidualFkModel", "OdometryModel", "NonFiniteLoss",
    "corrected_fk", "analytical_odometry", "analytical_odometry_arrays", "corrected_odometry",
    "current_goal", "residual_error", "residual_error_arrays",
    "save_checkpoint", "load_checkpoint",
]


def _resolve(chain, default):
    if chain is None:
        return bundled_chain(default)
    if isinstance(chain, str):
        return bundled_chain(chain)
    return chain


def pose_features(p):
    """(..., 7) pose -> (..., 9) translation + 6D rotation."""
    R = quat_to_matrix(p[..., 3:])
    return np.concatenate([p[..., :3], rot6d_from_matrix(R)], axis=-1)


def pose_from_features(t, r6):
    R = safe_matrix_from_rot6d(r6)
    m = np.zeros(R.shape[:-2] + (4, 4))
    m[..., :3, :3] = R
    m[..., :3, 3] = t
    m[..., 3, 3] = 1.0
    return matrices_to_arrays(m)


def analytical_odometry_arrays(leg: KinematicChain, y_t, y_0):
    """Base pose at t relative to t=0 from leg FK, assuming the foot stays put."""
    return inv_compose_arrays(fk_array(leg, y_0), fk_array(leg, y_t))


def analytical_odometry(leg: KinematicChain, y_t, y_0) -> Pose:
    return Pose.from_array(analytical_odometry_arrays(leg, np.asarray(y_t, float), np.asarray(y_0, float)))


class _ResidualBase(BaseEstimator):
    """Shared fitting/inference for the two estimators."""

    _default_chain = "arm_waist"
    _kind = ""

    def _chain(self):
        return _resolve(self.chain, self._default_chain)

    # subclasses map raw inputs to (features, analytical pose)
    def _features(self, X):
        raise NotImplementedError

    def _check_X(self, X):
        return check_array(X, dtype=np.float64)

    def _labels(self, est, y):
        if self.residual:
            target = compose_arrays(inverse_arrays(est), y)
        else:
            target = y
        f = pose_features(target)
        return f[:, :3], f[:, 3:] - ROT6D_IDENTITY

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_X(X)
        y = check_array(y, dtype=np.float64)
        if y.shape != (len(X), 7):
            raise ValueError("y must be (n_samples, 7) poses")
        feats, est = self._features(X)
        lt, lr = self._labels(est, y)

        self.x_mean_ = feats.mean(0)
        std = feats.std(0)
        self.x_std_ = np.where(std > 1e-9, std, 1.0)
        if self.residual:
            # scale only: keeps a zero output meaning "identity residual"
            self.t_shift_, self.r_shift_ = np.zeros(3), np.zeros(6)
        else:
            self.t_shift_, self.r_shift_ = lt.mean(0), lr.mean(0)
        self.t_scale_ = np.maximum(np.sqrt(np.mean((lt - self.t_shift_) ** 2, axis=0)), 1e-6)
        self.r_scale_ = np.maximum(np.sqrt(np.mean((lr - self.r_shift_) ** 2, axis=0)), 1e-6)

        dtype = np.dtype(self.dtype)
        self.mlp_ = Mlp(feats.shape[1], self.hidden, self.depth, seed=self.seed, dtype=dtype)
        val = {}
        if X_val is not None:
            Xv = self._check_X(X_val)
            fv, ev = self._features(Xv)
            vt, vr = self._labels(ev, check_array(y_val, dtype=np.float64))
            val = dict(Xv=self._norm(fv), Yvt=(vt - self.t_shift_) / self.t_scale_,
                       Yvr=(vr - self.r_shift_) / self.r_scale_)
        self.history_ = fit_mlp(
            self.mlp_, self._norm(feats), (lt - self.t_shift_) / self.t_scale_, (lr - self.r_shift_) / self.r_scale_,
            lr=self.lr, weight_decay=self.weight_decay, batch=self.batch_size, epochs=self.epochs,
            seed=self.seed, **val,
        )
        self.dataset_hash_ = _hash_arrays(X, y)
        return self

    def _norm(self, feats):
        return (feats - self.x_mean_) / self.x_std_

    def _raw_output(self, X):
        feats, est = self._features(X)
        ot, orr = self.mlp_(self._norm(feats))
        t = np.asarray(ot, np.float64) * self.t_scale_ + self.t_shift_
        r = np.asarray(orr, np.float64) * self.r_scale_ + self.r_shift_ + ROT6D_IDENTITY
        return pose_from_features(t, r), est

    def predict_residual(self, X):
        """Correction pose (n, 7); only meaningful for the residual variant."""
        check_is_fitted(self, "mlp_")
        out, _ = self._raw_output(self._check_X(X))
        return out

    def predict(self, X):
        """Corrected pose estimate (n, 7)."""
        check_is_fitted(self, "mlp_")
        out, est = self._raw_output(self._check_X(X))
        return compose_arrays(est, out) if self.residual else out

    def analytical(self, X):
        return self._features(self._check_X(X))[1]

    def translation_error(self, X, y) -> float:
        """Mean translation distance between predictions and reference poses, metres."""
        return float(np.mean(translation_errors(self.predict(X), np.asarray(y, float))))

    # -- checkpoint payload -------------------------------------------------

    def _hp(self):
        return {k: v for k, v in self.get_params().items() if k != "chain"}

    def to_dict(self):
        check_is_fitted(self, "mlp_")
        d = self.mlp_.to_dict()
        chain = self._chain()
        return {
            "kind": self._kind,
            "arch": d["arch"],
            "arch_hash": d["arch_hash"],
            "params": d["params"],
            "norm": {k: getattr(self, k + "_").tolist() for k in
                     ("x_mean", "x_std", "t_shift", "t_scale", "r_shift", "r_scale")},
            "hp": self._hp(),
            "chain": chain.name,
            "chain_hash": chain.digest(),
            "dataset_hash": self.dataset_hash_,
            "curves": {"train": self.history_.train, "val": self.history_.val},
        }


def _hash_arrays(*arrs):
    h = hashlib.sha256()
    for a in arrs:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


class ResidualFkModel(_ResidualBase):
    """End-effector correction from joints and the analytical FK pose.

    Parameters
    ----------
    chain : KinematicChain or bundled chain name
    residual : bool
        False trains the direct (absolute pose) ablation instead.
    hidden, depth : int
        MLP width and number of hidden layers.
    lr, weight_decay, batch_size, epochs, seed :
        AdamW training settings.
    dtype : str
        Training precision; ``"float32"`` is about twice as fast.

    ``fit(X, y)`` takes joint vectors ``X`` (n, dof) and measured end-effector
    poses ``y`` (n, 7) in the base frame.
    """

    _kind = "fk"

    def __init__(self, chain="arm_waist", residual=True, hidden=256, depth=3, lr=1e-4,
                 weight_decay=1e-2, batch_size=256, epochs=50, seed=0, dtype="float32"):
        self.chain = chain
        self.residual = residual
        self.hidden = hidden
        self.depth = depth
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self._chain().dof:
            raise ValueError(f"expected {self._chain().dof} joint values, got {X.shape[1]}")
        return X

    def _features(self, X):
        R, p = fk_rt(self._chain(), X)
        est = fk_array(self._chain(), X)
        return np.concatenate([X, p, rot6d_from_matrix(R)], axis=1), est


class OdometryModel(_ResidualBase):
    """Leg-odometry correction from the current and initial leg joints.

    ``fit(X, y)`` takes ``X`` = [y_t, y_0] rows (n, 2 * leg dof) and the true
    relative base poses ``y`` (n, 7).  Other parameters as in ResidualFkModel.
    """

    _default_chain = "leg"
    _kind = "odom"

    def __init__(self, chain="leg", residual=True, hidden=256, depth=3, lr=1e-4,
                 weight_decay=1e-2, batch_size=256, epochs=50, seed=0, dtype="float32"):
        self.chain = chain
        self.residual = residual
        self.hidden = hidden
        self.depth = depth
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2 * self._chain().dof:
            raise ValueError(f"expected [y_t, y_0] with {2 * self._chain().dof} columns, got {X.shape[1]}")
        return X

    def _features(self, X):
        n = self._chain().dof
        est = analytical_odometry_arrays(self._chain(), X[:, :n], X[:, n:])
        return np.concatenate([X, pose_features(est)], axis=1), est


def _from_dict(d, expect_kind=None, chain=None):
    kind = d.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"checkpoint holds a {kind!r} model, expected {expect_kind!r}")
    if architecture_hash(d["arch"]) != d["arch_hash"]:
        raise ValueError("architecture hash mismatch")
    cls = ResidualFkModel if kind == "fk" else OdometryModel
    model = cls(chain=chain if chain is not None else d["chain"], **d["hp"])
    if model._chain().digest() != d["chain_hash"]:
        raise ValueError("checkpoint was trained on a different chain")
    model.mlp_ = Mlp.from_dict(d, dtype=np.dtype(model.dtype))
    if model.mlp_.arch["width"] != model.hidden or model.mlp_.arch["depth"] != model.depth:
        raise ValueError("architecture does not match hyperparameters")
    for k, v in d["norm"].items():
        setattr(model, k + "_", np.asarray(v, dtype=np.float64))
    model.dataset_hash_ = d["dataset_hash"]
    from .mlp import TrainHistory
    model.history_ = TrainHistory(list(d["curves"]["train"]), list(d["curves"]["val"]))
    return model


def save_checkpoint(model, path, extra: dict | None = None):
    from .io_utils import write_atomic

    d = model.to_dict()
    if extra:
        d["meta"] = extra
    write_atomic(path, json.dumps(d))


def load_checkpoint(path, expect_kind=None, expect_arch_hash=None, chain=None):
    """Load a model; rejects a kind, chain or architecture that does not match."""
    d = json.loads(Path(path).read_text())
    if expect_arch_hash is not None and d.get("arch_hash") != expect_arch_hash:
        raise ValueError("architecture hash mismatch")
    return _from_dict(d, expect_kind, chain)


# ---------------------------------------------------------------------------
# estimators used by the control loop
# ---------------------------------------------------------------------------

def corrected_fk(model, chain, x) -> Pose:
    x = np.asarray(x, dtype=float)
    if model is None:
        return Pose.from_array(fk_array(chain, x))
    return Pose.from_array(model.predict(x.reshape(1, -1))[0])


def corrected_odometry(model, leg, y_t, y_0) -> Pose:
    if model is None:
        return analytical_odometry(leg, y_t, y_0)
    X = np.concatenate([np.asarray(y_t, float), np.asarray(y_0, float)]).reshape(1, -1)
    return Pose.from_array(model.predict(X)[0])


def current_goal(goal, odom):
    """Goal (defined in the base frame at t=0) expressed in the current base frame."""
    return compose_arrays(goal, odom)


def residual_error_arrays(ee, goal, odom):
    """Pose of the end effector relative to the odometry-compensated goal, (..., 7)."""
    return inv_compose_arrays(ee, current_goal(goal, odom))


def residual_error(model_fk, model_odom, x, y_t, y_0, goal_ee: Pose, chain=None, leg=None) -> Pose:
    """Residual pose error between the estimated end effector and the goal.

    ``None`` for either model falls back to the analytical estimate.
    """
    chain = _resolve(chain, "arm_waist")
    leg = _resolve(leg, "leg")
    ee = corrected_fk(model_fk, chain, x).to_array()
    odom = corrected_odometry(model_odom, leg, y_t, y_0).to_array()
    return Pose.from_array(residual_error_arrays(ee, goal_ee.to_array(), odom))
