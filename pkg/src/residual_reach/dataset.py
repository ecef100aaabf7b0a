"""Training data from driving the simulated robot across the workspace.

Episodes reach random goals with the analytical estimators and a slowly
varying exploration offset on the commands.  Rows are stored episode after
episode, so row order is the order the data would have been recorded in.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .chain import KinematicChain, bundled_chain
from .control import EpisodeConfig, simulate
from .io_utils import dumps_jsonl, loads_jsonl
from .kinematics import fk_array
from .plant import Plant, PlantConfig
from .se3 import inv_compose_arrays

COLUMNS = ("t", "episode", "x", "fk_pose", "mocap_ee", "y", "fk_base", "mocap_base")
COLLECT_EPISODE = EpisodeConfig(horizon=250, grasp_thresh=None, ee_estimator="analytical",
                                base_estimator="analytical")


@dataclass
class Dataset:
    t: np.ndarray  # (N,) row index in recording order
    episode: np.ndarray  # (N,)
    x: np.ndarray  # (N, dof) arm encoders
    fk_pose: np.ndarray  # (N, 7) analytical EE pose, base frame
    mocap_ee: np.ndarray  # (N, 7) measured EE pose, base frame
    y: np.ndarray  # (N, 6) leg encoders
    fk_base: np.ndarray  # (N, 7) analytical base pose, ankle frame
    mocap_base: np.ndarray  # (N, 7) measured base pose, ankle frame
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def subset(self, idx) -> "Dataset":
        return Dataset(*(getattr(self, c)[idx] for c in COLUMNS), header=dict(self.header))

    def split(self, frac: float = 2 / 3):
        """Chronological (train, val); the first ``floor(frac * N)`` rows train."""
        n_train = int(np.floor(len(self) * frac + 1e-9))
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in COLUMNS:
            h.update(np.ascontiguousarray(getattr(self, c)).tobytes())
        return h.hexdigest()[:16]

    # -- model inputs ---------------------------------------------------------

    def fk_xy(self):
        """(joints, measured EE poses) for the FK model."""
        return self.x, self.mocap_ee

    def odometry_pairs(self, n_pairs: int | None = None, seed: int = 0, from_start: bool = False):
        """Leg-joint pairs (m <= n) within an episode and their measured relative base pose.

        Returns ``X`` = [y_n, y_m] (k, 12) and ``Y`` (k, 7).  ``from_start``
        pins m to the first row of each episode in this dataset.
        """
        ep = self.episode
        starts = np.r_[0, np.flatnonzero(np.diff(ep)) + 1]
        first = np.repeat(starts, np.diff(np.r_[starts, len(ep)]))
        rng = np.random.default_rng(seed)
        if from_start:
            n_idx = np.arange(len(ep)) if n_pairs is None else rng.choice(len(ep), size=n_pairs, replace=True)
            m_idx = first[n_idx]
        else:
            k = len(ep) if n_pairs is None else n_pairs
            n_idx = rng.integers(0, len(ep), size=k)
            m_idx = first[n_idx] + np.floor(rng.random(k) * (n_idx - first[n_idx] + 1)).astype(int)
        X = np.concatenate([self.y[n_idx], self.y[m_idx]], axis=1)
        Y = inv_compose_arrays(self.mocap_base[m_idx], self.mocap_base[n_idx])
        return X, Y

    # -- file format ------------------------------------------------------------

    def to_jsonl(self) -> str:
        recs = []
        for i in range(len(self)):
            recs.append({
                "t": int(self.t[i]), "episode": int(self.episode[i]),
                **{c: [float(v) for v in getattr(self, c)[i]] for c in COLUMNS[2:]},
            })
        return dumps_jsonl(self.header, recs)

    @classmethod
    def from_jsonl(cls, text: str) -> "Dataset":
        header, recs = loads_jsonl(text)
        if not recs:
            raise ValueError("dataset has no records")
        cols = {"t": np.array([r["t"] for r in recs], dtype=int),
                "episode": np.array([r["episode"] for r in recs], dtype=int)}
        for c in COLUMNS[2:]:
            cols[c] = np.array([r[c] for r in recs], dtype=float)
        return cls(**cols, header=header)


def exploration_noise(seed, episode_ids, horizon, dof, sigma=0.05, rho=0.95):
    """AR(1) command offsets with stationary std ``sigma``, seeded per episode."""
    out = np.zeros((len(episode_ids), horizon, dof))
    for k, e in enumerate(episode_ids):
        w = np.random.default_rng([seed, int(e), 2]).standard_normal((horizon, dof))
        w *= sigma * np.sqrt(1 - rho**2)
        acc = np.zeros(dof)
        for t in range(horizon):
            acc = rho * acc + w[t]
            out[k, t] = acc
    return out


def collect_dataset(chain: KinematicChain, cfg: PlantConfig, goals, n_samples: int | None = None,
                    episode: EpisodeConfig = COLLECT_EPISODE, explore_sigma: float = 0.05,
                    leg_chain: KinematicChain | None = None, seed: int = 0, batch: int = 64) -> Dataset:
    """Drive the plant to each goal in turn and record every tick.

    ``n_samples`` truncates the recording (goals beyond it are not run).
    """
    goals = np.atleast_2d(np.asarray(goals, float))
    if len(goals) == 0:
        raise ValueError("need at least one goal")
    leg = leg_chain if leg_chain is not None else bundled_chain("leg")
    T = episode.horizon
    n_goals = len(goals) if n_samples is None else min(len(goals), -(-n_samples // T))
    rows = {c: [] for c in ("episode", "x", "mocap_ee", "y", "mocap_base")}
    for s in range(0, n_goals, batch):
        ids = np.arange(s, min(s + batch, n_goals))
        plant = Plant(chain, cfg, leg_chain=leg, episode_ids=ids)
        noise = exploration_noise(seed, ids, T, chain.dof, explore_sigma)
        ys = np.zeros((len(ids), T, leg.dof))
        base_m = np.zeros((len(ids), T, 7))
        ee_m = np.zeros((len(ids), T, 7))

        def record(t, st, e, b):
            ys[:, t] = st.y_measured
            ee_m[:, t] = e
            base_m[:, t] = b

        logs = simulate(plant, goals[ids], None, episode, cmd_noise=noise, observer=record)
        for k, log in enumerate(logs):
            rows["episode"].append(np.full(T, ids[k]))
            rows["x"].append(log.q_meas)
            rows["mocap_ee"].append(ee_m[k])
            rows["y"].append(ys[k])
            rows["mocap_base"].append(base_m[k])
    data = {c: np.concatenate(v) for c, v in rows.items()}
    n = len(data["episode"]) if n_samples is None else n_samples
    data = {c: v[:n] for c, v in data.items()}
    header = {
        "config_hash": cfg.digest(), "seed": int(seed), "chain_hash": chain.digest(),
        "leg_chain_hash": leg.digest(), "episode_ticks": T, "explore_sigma": explore_sigma,
        "goals_hash": hashlib.sha256(goals.tobytes()).hexdigest()[:16], "n": int(n),
    }
    return Dataset(np.arange(n), data["episode"], data["x"], fk_array(chain, data["x"]), data["mocap_ee"],
                   data["y"], fk_array(leg, data["y"]), data["mocap_base"], header=header)


def dataset_config_hash(header: dict) -> str:
    return hashlib.sha256(json.dumps(header, sort_keys=True).encode()).hexdigest()[:16]
