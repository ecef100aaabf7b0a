"""Serial kinematic chain description and its text format.

Grammar (whitespace and ``#`` comments are insignificant)::

    document   := item*
    item       := "name" "=" STRING
                | "ee_offset" "=" array7
                | "joint" "{" field* "}"
    field      := "name" "=" STRING
                | "parent" "=" STRING
                | "type" "=" ("revolute" | "prismatic")     # default revolute
                | "axis" "=" array3
                | "origin" "=" array7                     # tx ty tz qw qx qy qz
                | "limits" "=" "[" NUMBER "," NUMBER "]"
    array<n>   := "[" NUMBER ("," NUMBER){n-1} "]"

String values may be quoted or bare identifiers.  The first joint's parent
must be ``base``; every later joint's parent must be the previous joint.
Limits with ``lo == hi`` lock the joint.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .se3 import Pose


class ParseError(ValueError):
    def __init__(self, line, offset, reason):
        super().__init__(f"line {line} (byte {offset}): {reason}")
        self.line = line
        self.offset = offset
        self.reason = reason


class ValidationError(ValueError):
    def __init__(self, joint, reason):
        super().__init__(f"joint {joint!r}: {reason}")
        self.joint = joint
        self.reason = reason


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str
    axis: np.ndarray
    origin: Pose
    limits: tuple
    kind: str = "revolute"

    @property
    def locked(self) -> bool:
        return self.limits[0] == self.limits[1]


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple
    ee_offset: Pose

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> list:
        return [j.name for j in self.joints]

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints], dtype=float)

    def index(self, joint_name: str) -> int:
        return self.joint_names.index(joint_name)

    def clip(self, q):
        return np.clip(q, self.lower, self.upper)

    def with_limits(self, limits: dict) -> "KinematicChain":
        """Copy with some joints' limits replaced, e.g. ``{"waist_yaw": (0, 0)}``."""
        unknown = set(limits) - set(self.joint_names)
        if unknown:
            raise KeyError(f"unknown joints: {sorted(unknown)}")
        joints = tuple(
            replace(j, limits=tuple(float(v) for v in limits[j.name])) if j.name in limits else j
            for j in self.joints
        )
        return replace(self, joints=joints)

    def locked(self, names) -> "KinematicChain":
        return self.with_limits({n: (0.0, 0.0) for n in names})

    def scaled(self, link_scale) -> "KinematicChain":
        """Copy whose link translations are multiplied per joint.

        ``link_scale`` has ``dof + 1`` entries: one per joint origin, then the
        end-effector offset.
        """
        s = np.asarray(link_scale, dtype=float)
        if s.shape != (self.dof + 1,):
            raise ValueError(f"link_scale needs {self.dof + 1} entries, got {s.shape}")
        joints = tuple(
            replace(j, origin=Pose(j.origin.t * s[i], j.origin.r)) for i, j in enumerate(self.joints)
        )
        return replace(self, joints=joints, ee_offset=Pose(self.ee_offset.t * s[-1], self.ee_offset.r))

    def digest(self) -> str:
        return hashlib.sha256(dumps_chain(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    rb"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<string>"[^"\n]*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.\-]*)
  | (?P<punct>[{}\[\]=,])
    """,
    re.VERBOSE,
)


def _tokenize(data: bytes):
    pos = 0
    line = 1
    out = []
    while pos < len(data):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ParseError(line, pos, f"unexpected character {data[pos:pos + 1]!r}")
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            out.append((kind, text.decode(), line, pos))
        line += text.count(b"\n")
        pos = m.end()
    out.append(("eof", "", line, pos))
    return out


class _Parser:
    def __init__(self, data: bytes):
        self.toks = _tokenize(data)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, tok, reason):
        raise ParseError(tok[2], tok[3], reason)

    def expect(self, text):
        tok = self.take()
        if tok[1] != text or tok[0] not in ("punct", "ident"):
            self.fail(tok, f"expected {text!r}, got {tok[1] or 'end of input'!r}")
        return tok

    def string(self):
        tok = self.take()
        if tok[0] == "string":
            return tok[1][1:-1]
        if tok[0] == "ident":
            return tok[1]
        self.fail(tok, "expected a string")

    def array(self, n=None):
        start = self.expect("[")
        vals = []
        while True:
            tok = self.take()
            if tok[0] != "number":
                self.fail(tok, "expected a number")
            vals.append(float(tok[1]))
            tok = self.take()
            if tok[1] == "]":
                break
            if tok[1] != ",":
                self.fail(tok, "expected ',' or ']'")
        if n is not None and len(vals) != n:
            self.fail(start, f"expected {n} numbers, got {len(vals)}")
        return vals

    def joint(self):
        open_tok = self.expect("{")
        fields = {}
        while self.peek()[1] != "}":
            key_tok = self.take()
            if key_tok[0] != "ident":
                self.fail(key_tok, "expected a field name or '}'")
            key = key_tok[1]
            if key in fields:
                self.fail(key_tok, f"duplicate field {key!r}")
            self.expect("=")
            if key in ("name", "parent", "type"):
                fields[key] = self.string()
            elif key == "axis":
                fields[key] = self.array(3)
            elif key == "origin":
                fields[key] = self.array(7)
            elif key == "limits":
                fields[key] = self.array(2)
            else:
                self.fail(key_tok, f"unknown joint field {key!r}")
        self.expect("}")
        missing = {"name", "parent", "axis", "origin", "limits"} - set(fields)
        if missing:
            self.fail(open_tok, f"joint missing fields {sorted(missing)}")
        return fields

    def document(self):
        name = "chain"
        joints = []
        ee = None
        while self.peek()[0] != "eof":
            tok = self.take()
            if tok[1] == "joint":
                joints.append(self.joint())
            elif tok[1] == "name":
                self.expect("=")
                name = self.string()
            elif tok[1] == "ee_offset":
                if ee is not None:
                    self.fail(tok, "duplicate ee_offset")
                self.expect("=")
                ee = self.array(7)
            else:
                self.fail(tok, f"unexpected {tok[1]!r}")
        if ee is None:
            self.fail(self.peek(), "missing ee_offset")
        return name, joints, ee


def _pose7(vals, what):
    q = np.asarray(vals[3:], dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValidationError(what, "origin quaternion is not unit norm")
    return Pose(vals[:3], q)


def parse_chain(text) -> KinematicChain:
    data = text.encode() if isinstance(text, str) else bytes(text)
    name, raw_joints, ee = _Parser(data).document()

    joints = []
    seen = set()
    prev = "base"
    for f in raw_joints:
        jn = f["name"]
        if jn in seen:
            raise ValidationError(jn, "duplicate joint name")
        seen.add(jn)
        if f["parent"] != prev:
            raise ValidationError(jn, f"parent must be {prev!r} in a serial chain, got {f['parent']!r}")
        axis = np.asarray(f["axis"], dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValidationError(jn, "axis is not unit norm")
        lo, hi = f["limits"]
        if lo > hi:
            raise ValidationError(jn, f"inverted limits [{lo}, {hi}]")
        kind = f.get("type", "revolute")
        if kind not in ("revolute", "prismatic"):
            raise ValidationError(jn, f"unknown joint type {kind!r}")
        axis.setflags(write=False)
        joints.append(Joint(jn, f["parent"], axis, _pose7(f["origin"], jn), (float(lo), float(hi)), kind))
        prev = jn
    return KinematicChain(name, tuple(joints), _pose7(ee, "ee_offset"))


def load_chain(path) -> KinematicChain:
    return parse_chain(Path(path).read_bytes())


def bundled_chain(name: str) -> KinematicChain:
    """Load one of the chains shipped in ``residual_reach/data`` (``arm_waist``, ``leg``, ...)."""
    ref = resources.files("residual_reach") / "data" / f"{name}.chain"
    return parse_chain(ref.read_bytes())


def _fmt(x):
    return repr(float(x))


def dumps_chain(chain: KinematicChain) -> str:
    lines = [f'name = "{chain.name}"', ""]
    for j in chain.joints:
        lines += [
            "joint {",
            f'  name = "{j.name}"',
            f'  parent = "{j.parent}"',
            f'  type = "{j.kind}"',
            "  axis = [" + ", ".join(_fmt(v) for v in j.axis) + "]",
            "  origin = [" + ", ".join(_fmt(v) for v in j.origin.to_array()) + "]",
            f"  limits = [{_fmt(j.limits[0])}, {_fmt(j.limits[1])}]",
            "}",
        ]
    lines.append("ee_offset = [" + ", ".join(_fmt(v) for v in chain.ee_offset.to_array()) + "]")
    return "\n".join(lines) + "\n"
