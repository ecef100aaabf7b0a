"""Reachable-workspace volume by voxel counting.

Each voxel centre is tested with position-only IK from a fixed seed set; a
voxel is reachable if any seed converges below the position tolerance.  The
volume is ``N_reach * resolution**3``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .chain import KinematicChain
from .kinematics import IkConfig, chain_frames, solve_ik_batch, spread_seeds

WORKSPACE_IK = IkConfig(damping=0.05, max_iters=100, pos_tol=5e-3, position_only=True, restarts=0)


@dataclass
class WorkspaceMap:
    lo: np.ndarray
    hi: np.ndarray
    resolution: float
    reachable: np.ndarray  # bool, shape (nx, ny, nz)
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.reachable.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.reachable))

    @property
    def volume(self) -> float:
        return self.count * self.resolution**3

    def centers(self):
        return grid_centers(self.lo, self.shape, self.resolution)

    def issuperset(self, other: "WorkspaceMap") -> bool:
        if other.shape != self.shape:
            raise ValueError("grids differ")
        return bool(np.all(self.reachable | ~other.reachable))


def grid_shape(lo, hi, resolution):
    span = (np.asarray(hi, float) - np.asarray(lo, float)) / resolution
    shape = np.rint(span).astype(int)
    if np.any(shape < 1):
        raise ValueError("bounds must span at least one voxel per axis")
    return tuple(int(s) for s in shape)


def grid_centers(lo, shape, resolution):
    axes = [np.asarray(lo, float)[k] + (np.arange(shape[k]) + 0.5) * resolution for k in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack(g, axis=-1).reshape(-1, 3)


def workspace_seeds(chain: KinematicChain, k: int = 8) -> np.ndarray:
    """The home configuration (clipped to limits) followed by ``k - 1`` spread seeds."""
    home = chain.clip(np.zeros(chain.dof))
    return np.vstack([home[None], spread_seeds(chain, k - 1)]) if k > 1 else home[None]


def reach_sphere(chain: KinematicChain):
    """Ball that contains every reachable end-effector position.

    Joints before the first movable joint are locked, so that joint's origin
    is fixed; beyond it the end effector is at most the summed link lengths
    (plus prismatic travel) away.
    """
    lock = [j.locked for j in chain.joints]
    first = lock.index(False) if False in lock else chain.dof
    q0 = chain.clip(np.zeros(chain.dof))
    _, p_ee, _, origins = chain_frames(chain, q0)
    if first == chain.dof:
        return p_ee, 0.0
    radius = sum(float(np.linalg.norm(j.origin.t)) for j in chain.joints[first + 1:])
    radius += float(np.linalg.norm(chain.ee_offset.t))
    radius += sum(max(abs(j.limits[0]), abs(j.limits[1])) for j in chain.joints[first:] if j.kind == "prismatic")
    return origins[first], radius


def estimate_workspace(
    chain: KinematicChain,
    lo,
    hi,
    resolution: float = 0.02,
    ik_cfg: IkConfig = WORKSPACE_IK,
    n_seeds: int = 8,
    name: str = "",
) -> WorkspaceMap:
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise ValueError("degenerate bounds")
    if not ik_cfg.position_only:
        raise ValueError("workspace IK must be position-only")
    shape = grid_shape(lo, hi, resolution)
    pts = grid_centers(lo, shape, resolution)
    reach = np.zeros(len(pts), dtype=bool)
    center, radius = reach_sphere(chain)
    # outside the sphere no configuration gets within tolerance
    candidate = np.linalg.norm(pts - center, axis=1) <= radius + ik_cfg.pos_tol
    for seed in workspace_seeds(chain, n_seeds):
        todo = np.flatnonzero(~reach & candidate)
        if todo.size == 0:
            break
        _, _, _, conv, _ = solve_ik_batch(chain, pts[todo], np.repeat(seed[None], todo.size, 0), ik_cfg)
        reach[todo[conv]] = True
    return WorkspaceMap(lo, hi, float(resolution), reach.reshape(shape), name=name)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def rle_encode(bits) -> list:
    """Run lengths of a flat boolean array, starting with a run of False."""
    flat = np.asarray(bits, dtype=bool).ravel()
    runs = []
    cur = False
    n = 0
    for b in flat:
        if b == cur:
            n += 1
        else:
            runs.append(n)
            cur = b
            n = 1
    runs.append(n)
    return runs


def rle_decode(runs, size) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    pos = 0
    val = False
    for r in runs:
        out[pos:pos + r] = val
        pos += r
        val = not val
    if pos != size:
        raise ValueError(f"run lengths cover {pos} voxels, expected {size}")
    return out


def dumps_workspace(ws: WorkspaceMap, extra_header: dict | None = None) -> str:
    lines = ["# workspace-map v1"]
    for k, v in (extra_header or {}).items():
        lines.append(f"{k} = {v}")
    lines += [
        f"name = {ws.name}",
        "lo = " + " ".join(repr(float(x)) for x in ws.lo),
        "hi = " + " ".join(repr(float(x)) for x in ws.hi),
        f"resolution = {ws.resolution!r}",
        "shape = " + " ".join(str(s) for s in ws.shape),
        f"count = {ws.count}",
        f"volume_m3 = {ws.volume!r}",
        "rle = " + " ".join(str(r) for r in rle_encode(ws.reachable)),
    ]
    return "\n".join(lines) + "\n"


def loads_workspace(text: str) -> WorkspaceMap:
    fields = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition(" = ")
        fields[k.strip()] = v.strip()
    shape = tuple(int(s) for s in fields["shape"].split())
    runs = [int(r) for r in fields["rle"].split()]
    bits = rle_decode(runs, int(np.prod(shape))).reshape(shape)
    ws = WorkspaceMap(
        np.array(fields["lo"].split(), dtype=float),
        np.array(fields["hi"].split(), dtype=float),
        float(fields["resolution"]),
        bits,
        name=fields.get("name", ""),
    )
    if ws.count != int(fields["count"]):
        raise ValueError("count header does not match bitmap")
    return ws


def summary_csv(maps) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_name", "N_reach", "volume_m3"])
    for ws in maps:
        w.writerow([ws.name, ws.count, f"{ws.volume:.6f}"])
    return buf.getvalue()
