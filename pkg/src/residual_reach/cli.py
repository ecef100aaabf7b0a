"""Command line entry point: ``residual-reach <subcommand> [--config C] [--seed S] [--out DIR]``.

Each subcommand reads its inputs, writes its outputs atomically inside
``--out`` and prints one summary line.  Exit codes: 0 ok, 2 bad config or
inputs, 3 missing upstream artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .calibration import DegenerateInput, kabsch_umeyama, read_pairs_csv
from .control import ConfigError, Estimators, RolloutLog, run_episodes, sample_goals
from .dataset import Dataset, collect_dataset
from .io_utils import write_atomic
from .retarget import NoFeasibleGrasp, SceneContext, dumps_grasps, filter_grasps, loads_grasps, retarget_candidate
from .se3 import translation_errors
from .scoring import cdf_csv, compute_metrics, metrics_csv, score_rollout

OUT_ENV = "RESIDUAL_REACH_OUT"
EXIT_CONFIG, EXIT_UPSTREAM, EXIT_RUNTIME = 2, 3, 4

FK_FILE, ODOM_FILE, DATA_FILE = "fk.json", "odom.json", "dataset.jsonl"


class UpstreamMissing(RuntimeError):
    pass


class RuntimeFailure(RuntimeError):
    pass


def _stamp(ctx) -> str:
    return f"# config_hash={ctx.hash} seed={ctx.seed}\n"


class Context:
    def __init__(self, args, command):
        cfg = C.load_config(args.config)
        if args.seed is not None:
            cfg["experiment"]["seed"] = int(args.seed)
        self.cfg = C.with_ablations(cfg, args.ablate)
        self.seed = int(self.cfg["experiment"].get("seed", 0))
        self.hash = C.config_hash(self.cfg)
        out = args.out or os.environ.get(OUT_ENV) or os.path.join("runs", command)
        self.out = Path(out)

    def header(self, **kw):
        return {"config_hash": self.hash, "seed": self.seed, **kw}

    def write(self, name, data):
        path = self.out / name
        write_atomic(path, data)
        return path


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UpstreamMissing(f"{what} not found: {path}")
    return path


def _goals(ctx):
    """All goals with their group labels, deterministic in the config seed."""
    chain = C.arm_chain(ctx.cfg)
    g = ctx.cfg["goals"]
    goals, labels = [], []
    for k, (label, box) in enumerate(C.goal_sets(ctx.cfg)):
        try:
            goals.append(sample_goals(chain, int(g["n"]), seed=int(g["seed"]) + 1000 * k + ctx.seed, box=box))
        except RuntimeError as e:
            raise RuntimeFailure(f"goal sampling failed for {label}: {e}") from e
        labels += [label] * int(g["n"])
    return np.concatenate(goals), labels


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_collect(ctx, args):
    cfg = ctx.cfg
    d = cfg["dataset"]
    chain, leg = C.arm_chain(cfg), C.leg_chain(cfg)
    ep = C.episode_config(cfg)
    ep = replace(ep, horizon=int(d["episode_ticks"]), grasp_thresh=None, ee_estimator="analytical",
                 base_estimator="analytical", use_goal_adjust=False)
    n = int(d["n_samples"])
    n_goals = -(-n // ep.horizon)
    goals = sample_goals(chain, n_goals, seed=int(d["goal_seed"]) + ctx.seed)
    ds = collect_dataset(chain, C.plant_config(cfg), goals, n, episode=ep, explore_sigma=float(d["explore_sigma"]),
                         leg_chain=leg, seed=ctx.seed)
    ds.header.update(ctx.header())
    path = ctx.write(DATA_FILE, ds.to_jsonl())
    return f"collect: {len(ds)} rows from {n_goals} episodes -> {path}"


def _load_dataset(ctx, args) -> Dataset:
    path = _need(Path(args.data) if args.data else ctx.out / DATA_FILE, "dataset")
    try:
        return Dataset.from_jsonl(path.read_text())
    except (ValueError, KeyError) as e:
        raise ConfigError(f"unreadable dataset {path}: {e}") from e


def _train(ctx, args, kind):
    from .mlp import NonFiniteLoss
    from .residual import OdometryModel, ResidualFkModel, save_checkpoint

    ds = _load_dataset(ctx, args)
    tr, va = ds.split()
    hp = dict(C.model_params(ctx.cfg), seed=ctx.seed)
    if kind == "fk":
        model = ResidualFkModel(chain=C.arm_chain(ctx.cfg), **hp)
        X, Y, Xv, Yv = tr.x, tr.mocap_ee, va.x, va.mocap_ee
        fname = FK_FILE
    else:
        model = OdometryModel(chain=C.leg_chain(ctx.cfg), **hp)
        n_pairs = int(ctx.cfg["model"]["odom_pairs"])
        X, Y = tr.odometry_pairs(n_pairs, seed=ctx.seed)
        Xv, Yv = va.odometry_pairs(max(1, n_pairs // 2), seed=ctx.seed + 1)
        fname = ODOM_FILE
    t0 = time.perf_counter()
    try:
        model.fit(X, Y, Xv, Yv)
    except NonFiniteLoss as e:
        raise RuntimeFailure(f"training diverged: {e}") from e
    base = float(np.mean(translation_errors(model.analytical(Xv), Yv)))
    err = model.translation_error(Xv, Yv)
    path = ctx.out / fname
    save_checkpoint(model, path, ctx.header(dataset=ds.header, val_base_m=base, val_err_m=err))
    curves = "epoch,train,val\n" + "".join(
        f"{i},{a:.8g},{b:.8g}\n" for i, (a, b) in enumerate(zip(model.history_.train, model.history_.val)))
    ctx.write(f"{kind}_curves.csv", _stamp(ctx) + curves)
    return (f"train-{kind}: val translation error {base * 100:.3f} -> {err * 100:.3f} cm "
            f"({time.perf_counter() - t0:.0f}s) -> {path}")


def cmd_train_fk(ctx, args):
    return _train(ctx, args, "fk")


def cmd_train_odom(ctx, args):
    return _train(ctx, args, "odom")


def _models(ctx, args, ep):
    from .residual import load_checkpoint

    src = Path(args.models) if args.models else ctx.out
    fk = odom = None
    try:
        if ep.ee_estimator == "neural":
            fk = load_checkpoint(_need(src / FK_FILE, "FK checkpoint"), "fk", chain=C.arm_chain(ctx.cfg))
        if ep.base_estimator == "neural":
            odom = load_checkpoint(_need(src / ODOM_FILE, "odometry checkpoint"), "odom", chain=C.leg_chain(ctx.cfg))
    except (ValueError, KeyError) as e:
        raise ConfigError(f"checkpoint rejected: {e}") from e
    return Estimators(fk, odom)


def cmd_track(ctx, args):
    ep = C.episode_config(ctx.cfg)
    models = _models(ctx, args, ep)
    goals, labels = _goals(ctx)
    name = args.name or C.ablation_name(ctx.cfg)
    meta = ctx.header(config_name=name, episode_config=ep.digest(), plant=C.plant_config(ctx.cfg).digest())
    logs = run_episodes(C.arm_chain(ctx.cfg), C.plant_config(ctx.cfg), goals, models, ep,
                        leg_chain=C.leg_chain(ctx.cfg), meta=meta)
    for log, label in zip(logs, labels):
        log.meta["group"] = label
        ctx.write(f"logs/episode_{log.meta['episode']:04d}.jsonl", log.to_jsonl())
    m = compute_metrics(logs, name)
    return f"track[{name}]: {len(logs)} episodes, final error {m['trans_mean_cm']:.3f} cm -> {ctx.out / 'logs'}"


def _read_logs(d: Path):
    files = sorted((d / "logs").glob("episode_*.jsonl")) if (d / "logs").is_dir() else sorted(d.glob("episode_*.jsonl"))
    if not files:
        raise UpstreamMissing(f"no rollout logs under {d}")
    return [RolloutLog.from_jsonl(f.read_text()) for f in files]


def cmd_eval(ctx, args):
    dirs = [Path(p) for p in (args.logs or [ctx.out])]
    groups = []
    for d in dirs:
        logs = _read_logs(d)
        groups.append((logs[0].meta.get("config_name", d.name), logs))
    hashes = {lg.meta.get("chain_hash") for _, logs in groups for lg in logs}
    if len(hashes) != 1:
        raise ConfigError(f"logs come from different chains ({len(hashes)} chain hashes); refusing to aggregate")
    rows, rewards = [], {}
    for name, logs in groups:
        m = compute_metrics(logs, name)
        rows.append(m)
        ctx.write(f"cdf_{name}.csv", _stamp(ctx) + cdf_csv(m))
        scores = [score_rollout(lg) for lg in logs]
        rewards[name] = {
            "mean_total": float(np.mean([s["total"] for s in scores])),
            "terms": {k: (v if isinstance(v, str) else
                          float(np.mean([s["terms"][k]["weighted"] for s in scores])))
                      for k, v in scores[0]["terms"].items()},
        }
    path = ctx.write("metrics.csv", _stamp(ctx) + metrics_csv(rows))
    ctx.write("rewards.json", json.dumps({"header": ctx.header(), "rewards": rewards}, indent=1, sort_keys=True))
    best = min(rows, key=lambda r: r["trans_mean_cm"])
    return f"eval: {len(rows)} configs, best {best['config']} {best['trans_mean_cm']:.3f} cm -> {path}"


def cmd_workspace(ctx, args):
    from .workspace import dumps_workspace, estimate_workspace, summary_csv

    w = ctx.cfg["workspace"]
    chain = C.arm_chain(ctx.cfg)
    try:
        locked = chain.locked(w["lock"])
    except KeyError as e:
        raise ConfigError(str(e)) from e
    maps = []
    for name, ch in (("unlocked", chain), ("locked", locked)):
        ws = estimate_workspace(ch, w["lo"], w["hi"], float(w["resolution"]), name=name)
        ctx.write(f"workspace_{name}.txt", dumps_workspace(ws, ctx.header()))
        maps.append(ws)
    path = ctx.write("workspace.csv", _stamp(ctx) + summary_csv(maps))
    ratio = maps[0].volume / maps[1].volume if maps[1].count else float("inf")
    return (f"workspace: unlocked {maps[0].volume:.4f} m3, locked {maps[1].volume:.4f} m3, "
            f"ratio {ratio:.2f} -> {path}")


def cmd_calibrate(ctx, args):
    if not args.pairs:
        raise ConfigError("calibrate needs --pairs FILE.csv")
    path = _need(Path(args.pairs), "point-pair CSV")
    try:
        src, dst = read_pairs_csv(path.read_text())
        al = kabsch_umeyama(src, dst, with_scale=args.scale)
    except (ValueError, DegenerateInput) as e:
        raise ConfigError(str(e)) from e
    out = ctx.write("alignment.json", json.dumps({**ctx.header(), **al.to_dict()}, indent=1, sort_keys=True))
    return f"calibrate: {len(src)} pairs, rmse {al.rmse * 1000:.3f} mm, scale {al.scale:.6f} -> {out}"


def cmd_retarget(ctx, args):
    if not args.grasps:
        raise ConfigError("retarget needs --grasps FILE.jsonl")
    path = _need(Path(args.grasps), "grasp list")
    r = ctx.cfg["retarget"]
    try:
        cands = loads_grasps(path.read_text())
        scene = SceneContext(float(r["table_height"]), tuple(r["object_height_band"]), r["hand_side"])
        kept = filter_grasps(cands, scene)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad grasp input: {e}") from e
    except NoFeasibleGrasp as e:
        raise RuntimeFailure(str(e)) from e
    out = [retarget_candidate(g, offset_deg=float(r["offset_deg"]), yaw_limit_deg=float(r["yaw_limit_deg"]))
           for g in kept]
    dest = ctx.write("grasps.jsonl", dumps_grasps(out, ctx.header()))
    return f"retarget: {len(out)} of {len(cands)} grasps kept -> {dest}"


COMMANDS = {
    "collect": cmd_collect,
    "train-fk": cmd_train_fk,
    "train-odom": cmd_train_odom,
    "track": cmd_track,
    "eval": cmd_eval,
    "workspace": cmd_workspace,
    "calibrate": cmd_calibrate,
    "retarget": cmd_retarget,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file or preset name (default, tables, paper_scale)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or runs/<command>)")
    common.add_argument("--ablate", action="append", default=[], metavar="KEY=off",
                        help="switch a stage on/off; repeatable")
    p = argparse.ArgumentParser(prog="residual-reach", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        if name in ("train-fk", "train-odom"):
            s.add_argument("--data", help=f"dataset JSONL (default OUT/{DATA_FILE})")
        if name == "track":
            s.add_argument("--models", help="directory with fk.json / odom.json (default OUT)")
            s.add_argument("--name", help="config name recorded in the logs")
        if name == "eval":
            s.add_argument("--logs", nargs="+", help="track output directories, one per config")
        if name == "calibrate":
            s.add_argument("--pairs", help="CSV with src_x..dst_z columns")
            s.add_argument("--scale", action="store_true", help="also fit a uniform scale")
        if name == "retarget":
            s.add_argument("--grasps", help="grasp JSONL")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args, args.command)
        print(COMMANDS[args.command](ctx, args))
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UpstreamMissing as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (RuntimeError, FloatingPointError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
