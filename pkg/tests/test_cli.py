import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from residual_reach.cli import main

from conftest import synthetic_log

DATA = Path(__file__).parent / "data"

TINY = """
[dataset]
n_samples = 1500
[model]
hidden = 16
depth = 2
epochs = 2
odom_pairs = 1000
[goals]
n = 3
[control]
horizon = 150
[workspace]
resolution = 0.1
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return str(p)


def _strip(text):
    return "".join(line + "\n" for line in text.splitlines() if not line.startswith("#"))


def test_golden_eval(tmp_path):
    dirs = [str(DATA / "golden_eval" / n) for n in ("alpha", "beta", "gamma")]
    assert main(["eval", "--logs", *dirs, "--out", str(tmp_path)]) == 0
    got = (tmp_path / "metrics.csv").read_text()
    assert got.startswith("# config_hash=")
    assert _strip(got) == (DATA / "golden_eval" / "expected_metrics.csv").read_text()
    rewards = json.loads((tmp_path / "rewards.json").read_text())
    assert rewards["rewards"]["alpha"]["terms"]["torque"] == "unavailable"
    assert (tmp_path / "cdf_gamma.csv").exists()


def test_eval_refuses_mixed_chains(tmp_path):
    for name, h in (("a", "c0ffee"), ("b", "decaf0")):
        d = tmp_path / name / "logs"
        d.mkdir(parents=True)
        (d / "episode_0000.jsonl").write_text(synthetic_log(0.01, 0, 0, name, chain_hash=h).to_jsonl())
    assert main(["eval", "--logs", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o" / "metrics.csv").exists()


def test_exit_codes(tmp_path, tiny, capsys):
    out = str(tmp_path / "o")
    assert main(["track", "--config", tiny, "--out", out, "--ablate", "bogus=off"]) == 2
    assert main(["track", "--config", str(tmp_path / "missing.toml"), "--out", out]) == 2
    assert main(["train-fk", "--config", tiny, "--out", out]) == 3
    assert main(["track", "--config", tiny, "--out", out]) == 3
    assert main(["eval", "--out", out]) == 3
    assert main(["calibrate", "--pairs", str(tmp_path / "none.csv"), "--out", out]) == 3
    assert "missing input" in capsys.readouterr().err


def test_track_analytical_needs_no_models(tmp_path, tiny):
    out = tmp_path / "o"
    args = ["track", "--config", tiny, "--out", str(out),
            "--ablate", "use_neural_fk=off", "--ablate", "use_neural_odom=off"]
    assert main(args) == 0
    logs = sorted((out / "logs").glob("*.jsonl"))
    assert len(logs) == 3
    head = json.loads(logs[0].read_text().splitlines()[0])["header"]
    assert head["config_name"] == "use_neural_fk=off+use_neural_odom=off"
    assert "config_hash" in head and head["seed"] == 0


def test_calibrate(tmp_path):
    rng = np.random.default_rng(0)
    src = rng.uniform(size=(10, 3))
    R = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    dst = src @ R.T + [0.1, 0.2, 0.3]
    csv = tmp_path / "pairs.csv"
    csv.write_text("src_x,src_y,src_z,dst_x,dst_y,dst_z\n" + "".join(
        ",".join(repr(float(v)) for v in np.r_[s, d]) + "\n" for s, d in zip(src, dst)))
    assert main(["calibrate", "--pairs", str(csv), "--out", str(tmp_path / "o")]) == 0
    res = json.loads((tmp_path / "o" / "alignment.json").read_text())
    np.testing.assert_allclose(res["pose"][:3], [0.1, 0.2, 0.3], atol=1e-9)
    assert res["rmse"] < 1e-9 and "config_hash" in res
    csv.write_text("src_x,src_y,src_z,dst_x,dst_y,dst_z\n0,0,0,0,0,0\n1,1,1,1,1,1\n")
    assert main(["calibrate", "--pairs", str(csv), "--out", str(tmp_path / "o")]) == 2


def test_retarget(tmp_path):
    from residual_reach.retarget import GraspCandidate, dumps_grasps, loads_grasps
    from residual_reach.se3 import Pose

    good = GraspCandidate(Pose([0.3, 0.2, 0.8]), 0.9, 0.05)
    high = GraspCandidate(Pose([0.3, 0.2, 1.5]), 0.9, 0.05)
    f = tmp_path / "g.jsonl"
    f.write_text(dumps_grasps([good, high]))
    assert main(["retarget", "--grasps", str(f), "--out", str(tmp_path / "o")]) == 0
    out = loads_grasps((tmp_path / "o" / "grasps.jsonl").read_text())
    assert len(out) == 1 and out[0].retargeted
    f.write_text(dumps_grasps([high]))
    assert main(["retarget", "--grasps", str(f), "--out", str(tmp_path / "o2")]) == 4


def test_workspace(tmp_path, tiny):
    assert main(["workspace", "--config", tiny, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "workspace.csv").read_text().splitlines()
    assert rows[1] == "config_name,N_reach,volume_m3"
    unl, lk = (int(r.split(",")[1]) for r in rows[2:4])
    assert unl > lk > 0


def test_outputs_stay_in_out_dir(tmp_path, tiny, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "run"
    for cmd in ("collect", "train-fk", "train-odom", "track", "eval"):
        assert main([cmd, "--config", tiny, "--out", str(out)]) == 0
    written = {p for p in tmp_path.rglob("*") if p.is_file()}
    assert all(out in p.parents or p.name == "tiny.toml" for p in written)
    assert not list(out.rglob("*.tmp"))


def test_env_out_override(tmp_path, monkeypatch, tiny):
    monkeypatch.setenv("RESIDUAL_REACH_OUT", str(tmp_path / "envout"))
    shutil.copytree(DATA / "golden_eval" / "alpha", tmp_path / "envout", dirs_exist_ok=True)
    assert main(["eval"]) == 0
    assert (tmp_path / "envout" / "metrics.csv").exists()
