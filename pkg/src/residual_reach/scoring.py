"""Offline reward breakdown and tracking metrics for rollout logs."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .se3 import quat_conj, quat_mul, quat_to_matrix, quat_to_rotvec

UNAVAILABLE = "unavailable"

DEFAULT_WEIGHTS = {
    "ee_exp": 2.0,
    "upper_dof_exp": 4.0,
    "base_height_exp": 4.0,
    "dof_pos_limits": -5.0,
    "dof_vel_limits": -5.0,
    "termination": -250.0,
    "ee_lin_vel": -0.2,
    "ee_ang_vel": -0.02,
    "dof_acc": -2.5e-7,
    "dof_vel": -1e-3,
    "action_rate": -0.1,
    "torque": -1e-5,
    "base_ang_vel": -0.05,
    "base_lin_vel": -2.0,
    "base_orientation": -1.5,
    "torso_orientation": -1.0,
    "stance_symmetry": -0.5,
    "ankle_roll": -2.0,
    "feet_contact": -4.0,
    "feet_orientation": -2.0,
    "negative_knee": -1.0,
    "feet_spread": -10.0,
}

# need torques, contacts, both feet or a separate torso frame, none of which the log has
NOT_LOGGED = ("termination", "torque", "torso_orientation", "stance_symmetry", "ankle_roll",
              "feet_contact", "feet_orientation", "negative_knee", "feet_spread")


def _diff(x, dt):
    d = np.zeros_like(x)
    d[1:] = (x[1:] - x[:-1]) / dt
    return d


def _ang_vel(q, dt):
    w = np.zeros(q.shape[:-1] + (3,))
    rel = quat_mul(q[1:], quat_conj(q[:-1]))
    w[1:] = quat_to_rotvec(rel) / dt
    return w


def reward_terms(log) -> dict:
    """Per-term raw sums over the episode (before weighting)."""
    dt = float(log.meta.get("dt", 0.02))
    lo = np.asarray(log.meta["lower"])
    hi = np.asarray(log.meta["upper"])
    vmax = float(log.meta.get("max_vel", math.inf))
    q = log.q_meas
    qd = _diff(q, dt)
    qdd = _diff(qd, dt)
    ee_v = _diff(log.ee_true[:, :3], dt)
    base_v = _diff(log.base_true[:, :3], dt)
    up = quat_to_matrix(log.base_true[:, 3:])[:, 2, 2]  # cos of the tilt from vertical
    act = log.q_cmd
    act_rate = np.zeros(len(act))
    act_rate[1:] = np.sum((act[1:] - act[:-1]) ** 2, axis=1)
    terms = {
        "ee_exp": np.exp(-np.sum(log.de_true[:, :3] ** 2, axis=1)),
        "upper_dof_exp": np.exp(-np.sum((log.q_ref - q) ** 2, axis=1)),
        "base_height_exp": np.exp(-log.base_true[:, 2] ** 2),
        "dof_pos_limits": np.sum((q < lo) | (q > hi), axis=1).astype(float),
        "dof_vel_limits": np.sum(np.abs(qd) > vmax, axis=1).astype(float),
        "ee_lin_vel": np.sum(ee_v**2, axis=1),
        "ee_ang_vel": np.sum(_ang_vel(log.ee_true[:, 3:], dt) ** 2, axis=1),
        "dof_acc": np.linalg.norm(qdd, axis=1),
        "dof_vel": np.sum(qd**2, axis=1),
        "action_rate": act_rate,
        "base_ang_vel": np.sum(_ang_vel(log.base_true[:, 3:], dt) ** 2, axis=1),
        "base_lin_vel": np.sum(base_v**2, axis=1),
        "base_orientation": 1.0 - up,
    }
    return {k: float(np.sum(v)) for k, v in terms.items()}


def score_rollout(log, weights: dict | None = None) -> dict:
    """Weighted reward breakdown; terms the log cannot support are reported as unavailable.

    Returns ``{"terms": {name: {"sum", "weight", "weighted"} | "unavailable"}, "total": float}``.
    """
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    raw = reward_terms(log)
    out = {}
    total = 0.0
    for name, w in weights.items():
        if name in raw:
            out[name] = {"sum": raw[name], "weight": w, "weighted": w * raw[name]}
            total += w * raw[name]
        else:
            out[name] = UNAVAILABLE
    return {"terms": out, "total": total}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def final_errors(logs):
    """Arrays of final translation (m), rotation (deg) and joint (rad) errors."""
    t = np.array([lg.final_errors()[0] for lg in logs])
    r = np.array([lg.final_errors()[1] for lg in logs])
    j = np.array([lg.final_joint_error() for lg in logs])
    return t, r, j


def percentile_table(values, step: int = 1):
    """Nearest-rank percentiles 0..100: the smallest value with at least p% of data at or below it."""
    v = np.sort(np.asarray(values, float))
    n = len(v)
    out = []
    for p in range(0, 101, step):
        k = max(1, math.ceil(p / 100 * n))
        out.append((p, float(v[k - 1])))
    return out


def compute_metrics(logs, name: str = "") -> dict:
    if not logs:
        raise ValueError("need at least one log")
    t, r, j = final_errors(logs)
    tcm = t * 100.0
    return {
        "config": name,
        "n": len(logs),
        "trans_mean_cm": float(np.mean(tcm)),
        "trans_std_cm": float(np.std(tcm)),
        "rot_mean_deg": float(np.mean(r)),
        "rot_std_deg": float(np.std(r)),
        "joint_err_rad": float(np.mean(j)),
        "cdf": [(p, tv, rv) for (p, tv), (_, rv) in zip(percentile_table(tcm), percentile_table(r))],
    }


METRIC_COLUMNS = ("config", "n", "trans_mean_cm", "trans_std_cm", "rot_mean_deg", "rot_std_deg", "joint_err_rad")


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in rows:
        w.writerow([m["config"], m["n"]] + [f"{m[c]:.6f}" for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


def cdf_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["percentile", "trans_cm", "rot_deg"])
    for p, tv, rv in metrics["cdf"]:
        w.writerow([p, f"{tv:.6f}", f"{rv:.6f}"])
    return buf.getvalue()
