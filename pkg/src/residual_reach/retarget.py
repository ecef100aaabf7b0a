"""Grasp selection and parallel-jaw to dexterous-hand retargeting.

A grasp's approach direction is the local x axis of its pose.  Retargeting
turns the jaw frame 45 degrees about its own z axis, so the thumb can act as
one jaw, and then limits the base-frame yaw.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .io_utils import dumps_jsonl, loads_jsonl
from .se3 import Pose, compose, rot_z

YAW_LIMIT_DEG = 70.0
HAND_OFFSET_DEG = 45.0
GIMBAL_MARGIN_DEG = 1.0
DEFAULT_HAND_Y = {"left": 0.15, "right": -0.15}


class NoFeasibleGrasp(RuntimeError):
    pass


class AlreadyRetargeted(ValueError):
    pass


@dataclass(frozen=True)
class GraspCandidate:
    pose: Pose
    confidence: float
    width: float
    retargeted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if not self.width > 0:
            raise ValueError("width must be positive")

    @property
    def approach(self) -> np.ndarray:
        return self.pose.rotation[:, 0]

    def to_dict(self):
        d = {"pose": self.pose.to_list(), "confidence": self.confidence, "width": self.width}
        if self.retargeted:
            d["retargeted"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(Pose.from_array(d["pose"]), float(d["confidence"]), float(d["width"]),
                   bool(d.get("retargeted", False)))


@dataclass(frozen=True)
class SceneContext:
    table_height: float
    object_height_band: tuple  # (lo, hi) above the table top, metres
    hand_side: str = "left"
    hand_y: float | None = None  # lateral hand position; defaults by side

    def __post_init__(self):
        lo, hi = self.object_height_band
        if not lo < hi:
            raise ValueError("object_height_band needs lo < hi")
        if self.hand_side not in DEFAULT_HAND_Y:
            raise ValueError("hand_side must be 'left' or 'right'")

    @property
    def lateral(self) -> float:
        return DEFAULT_HAND_Y[self.hand_side] if self.hand_y is None else self.hand_y


def elevation_deg(approach) -> float:
    """Angle between a direction and the horizontal plane, degrees in [0, 90]."""
    a = np.asarray(approach, float)
    return math.degrees(math.asin(min(1.0, abs(a[2]) / np.linalg.norm(a))))


def filter_grasps(cands, ctx: SceneContext) -> list:
    """Drop far-side and out-of-band grasps, then rank the rest.

    A grasp is far-side when its approach has a lateral component pointing
    back toward the hand.  Survivors are ordered by elevation of the
    approach (flattest first), then confidence (highest first), then input
    order.
    """
    lo = ctx.table_height + ctx.object_height_band[0]
    hi = ctx.table_height + ctx.object_height_band[1]
    keep = []
    for i, g in enumerate(cands):
        side = g.pose.t[1] - ctx.lateral  # object offset from the hand, lateral
        if g.approach[1] * side < 0:
            continue
        if not lo <= g.pose.t[2] <= hi:
            continue
        keep.append((round(elevation_deg(g.approach), 9), -g.confidence, i, g))
    if not keep:
        raise NoFeasibleGrasp("no grasp survives the side and height filters")
    keep.sort(key=lambda k: k[:3])
    return [k[3] for k in keep]


def zyx_from_matrix(R):
    """Intrinsic Z-Y-X angles (yaw, pitch, roll), radians."""
    yaw = math.atan2(R[1, 0], R[0, 0])
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


def matrix_from_zyx(yaw, pitch, roll):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def clip_yaw(pose: Pose, limit_deg: float = YAW_LIMIT_DEG) -> Pose:
    """Clamp base-frame yaw, keeping pitch and roll; skipped near gimbal lock."""
    yaw, pitch, roll = zyx_from_matrix(pose.rotation)
    if abs(abs(math.degrees(pitch)) - 90.0) < GIMBAL_MARGIN_DEG:
        warnings.warn("pitch near +-90 deg, yaw undefined; not clipping", RuntimeWarning, stacklevel=2)
        return pose
    lim = math.radians(limit_deg)
    if -lim <= yaw <= lim:
        return pose
    yaw = max(-lim, min(lim, yaw))
    return Pose.from_rt(matrix_from_zyx(yaw, pitch, roll), pose.t)


def retarget_to_hand(g: GraspCandidate, local: bool = True, offset_deg: float = HAND_OFFSET_DEG,
                     yaw_limit_deg: float = YAW_LIMIT_DEG) -> Pose:
    """Hand pose for a jaw grasp: 45 deg about z (grasp-local by default), then yaw clip.

    Raises AlreadyRetargeted for a candidate that has been through this once,
    since the offset would accumulate.
    """
    if g.retargeted:
        raise AlreadyRetargeted("grasp was already retargeted")
    turn = rot_z(math.radians(offset_deg))
    # compose(a, b) applies b after a: compose(turn, g) turns in the grasp frame
    turned = compose(turn, g.pose) if local else compose(g.pose, turn)
    return clip_yaw(turned, yaw_limit_deg)


def retarget_candidate(g: GraspCandidate, **kw) -> GraspCandidate:
    return replace(g, pose=retarget_to_hand(g, **kw), retargeted=True)


def dumps_grasps(cands, header: dict | None = None) -> str:
    if header is not None:
        return dumps_jsonl(header, [g.to_dict() for g in cands])
    return "".join(json.dumps(g.to_dict(), sort_keys=True) + "\n" for g in cands)


def loads_grasps(text: str) -> list:
    """One grasp per line; an optional leading ``{"header": ...}`` line is skipped."""
    return [GraspCandidate.from_dict(r) for r in loads_jsonl(text)[1]]
