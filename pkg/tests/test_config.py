import json

import pytest

from vqloco import sim
from vqloco.config import MAX_ENVS, ConfigError, RunConfig, load_config
from vqloco.policy import TeacherWeights
from vqloco.worldmodel import WmWeights

# randomization ranges and hyperparameters as published, typed in independently of the package
RANGES = {
    "friction_range": (0.60, 1.00),
    "payload_range": (-2.00, 2.00),
    "kp_scale_range": (0.90, 1.10),
    "kd_scale_range": (0.90, 1.10),
    "dof_pos_noise": (-0.05, 0.05),
    "dof_vel_noise": (-0.50, 0.50),
    "ang_vel_noise": (-0.50, 0.50),
    "gravity_noise": (-0.05, 0.05),
}
HYPER = {
    "max_episode_len": 1500,
    "clip_len": 120,
    "fps": 30,
    "substeps": 6,
    "buff_len": 256,
    "termination_height": 0.2,
    "wm_batch": 512,
    "teacher_batch": 1024,
    "student_batch": 1024,
    "wm_len": 24,
    "teacher_len": 24,
    "student_len": 32,
    "lr": 2e-4,
    "gamma": 1.0,
    "wm_weights": (2.0, 1.0, 10.0, 5.0),
    "teacher_weights": (0.2, 0.1, 0.5 / 3 * 0.1, 0.5 / 3 * 0.1),
    "beta1": 0.05,
    "beta2": 0.01,
    "beta3": 0.001,
    "beta4": 1.0,
}


@pytest.mark.parametrize("key", sorted(RANGES))
def test_randomization_defaults(key):
    assert getattr(RunConfig(), key) == RANGES[key]


@pytest.mark.parametrize("key", sorted(HYPER))
def test_hyperparameter_defaults(key):
    got = getattr(RunConfig(), key)
    want = HYPER[key]
    if isinstance(want, tuple):
        assert got == pytest.approx(want, rel=1e-15)
    else:
        assert got == want


def test_derived_objects_carry_the_defaults():
    cfg = RunConfig()
    r = cfg.randomization()
    assert r.friction == RANGES["friction_range"] and r.payload == RANGES["payload_range"]
    sc = cfg.sim_config()
    assert sc.fps == 30 and sc.substeps == 6 and sc.termination_height == 0.2
    assert sim.SimConfig().substeps == 6
    w = WmWeights()
    assert (w.pos, w.rot, w.vel, w.angvel, w.gamma) == (2, 1, 10, 5, 1)
    t = TeacherWeights()
    assert (t.pos, t.rot, t.vel, t.angvel) == pytest.approx(HYPER["teacher_weights"], rel=1e-15)
    assert (t.beta1, t.beta2, t.beta3, t.beta4) == (0.05, 0.01, 0.001, 1.0)
    assert MAX_ENVS == 1024 and cfg.eval_envs == 64


def test_round_trip_through_json(tmp_path):
    cfg = RunConfig(seed=4, milestones=(1, 2, 3), enc_hidden=(16, 16))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


def test_unknown_and_mistyped_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys: bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="wrong type"):
        RunConfig.from_dict({"lr": "fast"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"hard_switch": 1})
    (tmp_path / "bad.json").write_text('{"seed": 1,\n "lr": }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


@pytest.mark.parametrize("bad", [
    {"milestones": [4, 4, 8]},
    {"friction_range": [1.0, 0.6]},
    {"refill_target": 300},
    {"evict_count": 100},
    {"gamma": 0.0},
    {"mode": "transformer"},
    {"kp": [1.0, 2.0]},
    {"n_envs": 2048},
    {"body_masses": [1.0]},
    {"lr": -1.0},
])
def test_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_overrides_win():
    assert load_config(None, {"seed": 9}).seed == 9
