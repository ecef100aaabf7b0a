"""Experiment configuration: TOML files layered over the bundled defaults.

Sections mirror the modules: ``[chain]``, ``[plant]``, ``[dataset]``,
``[model]``, ``[goals]``, ``[control]``, ``[ablations]``, ``[workspace]``,
``[retarget]``.  Any key left out keeps its default.  A bare preset name
(``default``, ``tables``, ``paper_scale``) loads a bundled file.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .chain import KinematicChain, bundled_chain, load_chain
from .control import ABLATION_KEYS, ConfigError, EpisodeConfig, GoalAdjustConfig, GoalBox
from .plant import PlantConfig

PRESETS = ("default", "tables", "paper_scale")

# keys outside the bundled default file, with their defaults
EXTRA_DEFAULTS = {
    "plant": {},
    "ablations": {},
    "workspace": {"lo": [-0.1, -0.3, 0.5], "hi": [0.7, 0.7, 1.3], "resolution": 0.02,
                  "lock": ["waist_yaw", "waist_roll", "waist_pitch"]},
    "retarget": {"table_height": 0.74, "object_height_band": [0.0, 0.3], "hand_side": "left",
                 "offset_deg": 45.0, "yaw_limit_deg": 70.0},
}

PLANT_KEYS = {"mocap_noise_sigma", "mocap_rot_sigma", "sway_amplitude", "sway_period", "sway_gain",
              "lag", "leg_lag", "ideal"}


def _preset_text(name: str) -> str:
    return (resources.files("residual_reach") / "data" / "presets" / f"{name}.toml").read_text()


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict):
            if k not in out and where:
                raise ConfigError(f"unknown section {where}{k}")
            out[k] = _merge(out.get(k, {}), v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def defaults() -> dict:
    d = tomllib.loads(_preset_text("default"))
    d.update(copy.deepcopy(EXTRA_DEFAULTS))
    return d


def parse_config(text: str) -> dict:
    try:
        over = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"bad config: {e}") from e
    base = defaults()
    unknown = set(over) - set(base)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec, vals in over.items():
        if not isinstance(vals, dict):
            raise ConfigError(f"[{sec}] must be a table")
        if sec in ("plant", "ablations"):
            continue
        extra = set(vals) - set(base[sec]) - ({"tables", "table_band"} if sec == "goals" else set())
        if extra:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")
    cfg = _merge(base, over)
    bad = set(cfg["plant"]) - PLANT_KEYS
    if bad:
        raise ConfigError(f"unknown keys in [plant]: {sorted(bad)}")
    return cfg


def load_config(path_or_preset: str | None = None) -> dict:
    if path_or_preset is None:
        return parse_config("")
    if path_or_preset in PRESETS:
        return parse_config(_preset_text(path_or_preset))
    p = Path(path_or_preset)
    if not p.is_file():
        raise ConfigError(f"config not found: {path_or_preset}")
    return parse_config(p.read_text())


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def with_ablations(cfg: dict, items) -> dict:
    """Apply ``key=on|off`` strings on top of the ``[ablations]`` table."""
    cfg = copy.deepcopy(cfg)
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or val not in ("on", "off"):
            raise ConfigError(f"ablation must look like key=off, got {item!r}")
        cfg["ablations"][key] = val == "on"
    unknown = set(cfg["ablations"]) - set(ABLATION_KEYS)
    if unknown:
        raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
    return cfg


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def _chain(ref: str) -> KinematicChain:
    try:
        return load_chain(ref) if Path(ref).suffix == ".chain" else bundled_chain(ref)
    except (FileNotFoundError, OSError) as e:
        raise ConfigError(f"chain not found: {ref}") from e


def arm_chain(cfg) -> KinematicChain:
    return _chain(cfg["chain"]["arm"])


def leg_chain(cfg) -> KinematicChain:
    return _chain(cfg["chain"]["leg"])


def plant_config(cfg) -> PlantConfig:
    kw = dict(cfg["plant"])
    ideal = kw.pop("ideal", False)
    kw["seed"] = cfg["experiment"].get("seed", 0)
    try:
        return PlantConfig.ideal(**kw) if ideal else PlantConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def episode_config(cfg) -> EpisodeConfig:
    c = cfg["control"]
    try:
        ep = EpisodeConfig(
            horizon=int(c["horizon"]), replan_every=int(c["replan_every"]), gain=float(c["gain"]),
            damping=float(c["damping"]), grasp_thresh=c["grasp_thresh"],
            goal_adjust=GoalAdjustConfig(c["alpha"], c["start_thresh"], c["stop_thresh"]),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return ep.with_ablations(cfg["ablations"])


def model_params(cfg) -> dict:
    m = cfg["model"]
    return {k: m[k] for k in ("hidden", "depth", "lr", "weight_decay", "batch_size", "epochs", "dtype")}


def goal_sets(cfg):
    """[(label, GoalBox)]: one box, or one per table height."""
    g = cfg["goals"]
    if "tables" not in g:
        return [("box", GoalBox(tuple(g["lo"]), tuple(g["hi"]), tuple(g["yaw_deg"])))]
    lo_b, hi_b = g.get("table_band", [0.05, 0.3])
    out = []
    for h in g["tables"]:
        lo = (g["lo"][0], g["lo"][1], h + lo_b)
        hi = (g["hi"][0], g["hi"][1], h + hi_b)
        out.append((f"table_{h:.2f}", GoalBox(lo, hi, tuple(g["yaw_deg"]))))
    return out


def ablation_name(cfg) -> str:
    ab = cfg["ablations"]
    if not ab:
        return "full"
    return "+".join(f"{k}={'on' if v else 'off'}" for k, v in sorted(ab.items()))

