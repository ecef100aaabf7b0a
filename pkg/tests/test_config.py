import pytest

from residual_reach import config as C
from residual_reach.control import ConfigError


def test_defaults_and_presets():
    d = C.load_config()
    assert d["model"]["lr"] == 1e-4 and d["model"]["hidden"] == 256
    assert d["control"]["alpha"] == 1.6 and d["control"]["replan_every"] == 300
    assert d["goals"]["lo"] == [0.1, -0.5, 0.65] and d["goals"]["yaw_deg"] == [-60.0, 60.0]
    t = C.load_config("tables")
    assert [label for label, _ in C.goal_sets(t)] == ["table_0.50", "table_0.74", "table_0.88"]
    assert t["goals"]["n"] == 60
    assert C.load_config("paper_scale")["dataset"]["n_samples"] == 540000
    assert len({C.config_hash(C.load_config(p)) for p in C.PRESETS}) == 3


def test_override_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[control]\ngain = 2.0\n[plant]\nsway_gain = 0.0\n[ablations]\nuse_replan = false\n")
    cfg = C.load_config(str(p))
    assert cfg["control"]["gain"] == 2.0 and cfg["control"]["horizon"] == 1500
    assert C.plant_config(cfg).sway_gain == 0.0
    ep = C.episode_config(cfg)
    assert ep.gain == 2.0 and not ep.use_replan
    assert C.ablation_name(cfg) == "use_replan=off"


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[control]\nspeed = 3\n",
    "[plant]\nelasticity_x = 1\n",
    "[ablations]\nturbo = false\n",
    "[control\n",
    "[control]\nalpha = 0.5\n",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        cfg = C.parse_config(text)
        C.episode_config(C.with_ablations(cfg, []))


def test_ablation_strings():
    cfg = C.with_ablations(C.load_config(), ["use_goal_adjust=off", "oracle=on"])
    assert cfg["ablations"] == {"use_goal_adjust": False, "oracle": True}
    for bad in (["use_replan"], ["use_replan=maybe"], ["warp=off"]):
        with pytest.raises(ConfigError):
            C.with_ablations(C.load_config(), bad)


def test_missing_files():
    with pytest.raises(ConfigError):
        C.load_config("/no/such/file.toml")
    cfg = C.load_config()
    cfg["chain"]["arm"] = "/no/such.chain"
    with pytest.raises(ConfigError):
        C.arm_chain(cfg)
