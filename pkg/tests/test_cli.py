import json
import subprocess
import sys

import pytest

from vqloco.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

from tiny import TINY


def write_config(tmp_path, name="config.json", **kw):
    cfg = dict(TINY, n_synth_clips=2, gait_loops=2, out_dir=str(tmp_path / "run"))
    cfg.update(kw)
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_usage_errors(tmp_path, capsys):
    assert run(capsys)[0] == EXIT_USAGE
    assert run(capsys, "fly")[0] == EXIT_USAGE
    assert run(capsys, "train", "--seed", "x")[0] == EXIT_USAGE
    assert run(capsys, "eval", "--policy", "oracle")[0] == EXIT_USAGE


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    code, _, err = run(capsys, "train", "--config", str(bad))
    assert code == EXIT_USAGE and "bogus" in err
    assert run(capsys, "train", "--config", str(tmp_path / "missing.json"))[0] == EXIT_USAGE
    bad.write_text(json.dumps({"milestones": [3, 2, 1]}))
    assert run(capsys, "gen-data", "--config", str(bad))[0] == EXIT_USAGE


def test_runtime_errors(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, _, err = run(capsys, "eval", "--config", cfg, "--checkpoint", str(tmp_path / "none.json"))
    assert code == EXIT_RUNTIME and "checkpoint" in err
    (tmp_path / "junk.json").write_text("{not json")
    assert run(capsys, "distill", "--config", cfg, "--checkpoint", str(tmp_path / "junk.json"))[0] == EXIT_RUNTIME
    assert run(capsys, "export", "--config", cfg, "--trajectory", str(tmp_path / "junk.json"))[0] == EXIT_RUNTIME


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "gen-data", "--config", cfg)
    assert code == EXIT_OK and len(json.loads(stdout)["clips"]) == 2
    assert run(capsys, "train", "--config", cfg)[0] == EXIT_OK
    assert json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])["epoch"] == 7
    assert run(capsys, "distill", "--config", cfg)[0] == EXIT_OK
    records = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == list(range(17))
    code, stdout, _ = run(capsys, "train-prior", "--config", cfg)
    assert code == EXIT_OK and "prior_heldout_acc" in json.loads(stdout)
    for policy in ("teacher", "student", "replay", "untrained"):
        code, stdout, _ = run(capsys, "eval", "--config", cfg, "--policy", policy, "--envs", "2")
        assert code == EXIT_OK
        assert json.loads(stdout)["n_envs"] == 2
        assert (out / f"eval_{policy}.json").exists()
    code, stdout, _ = run(capsys, "generate", "--config", cfg, "--steps", "15")
    assert code == EXIT_OK
    gen = json.loads(stdout)
    assert gen["steps"] <= 15
    code, stdout, _ = run(capsys, "export", "--config", cfg, "--trajectory", gen["trajectory"],
                          "--out", str(tmp_path / "gen.csv"))
    assert code == EXIT_OK and json.loads(stdout)["rows"] == gen["steps"] + 1
    code, stdout, _ = run(capsys, "export", "--config", cfg, "--policy", "teacher")
    assert code == EXIT_OK and (out / "trajectory.csv").exists()


def test_generate_before_prior_is_a_runtime_error(tmp_path, capsys):
    cfg = write_config(tmp_path, epochs=2, milestones=[1, 2, 3])
    assert run(capsys, "train", "--config", cfg)[0] == EXIT_OK
    assert run(capsys, "generate", "--config", cfg)[0] == EXIT_RUNTIME


def test_mode_mismatch_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, mode="vae", epochs=1, milestones=[1, 2, 3])
    assert run(capsys, "train", "--config", cfg)[0] == EXIT_OK
    vq = write_config(tmp_path, "vq.json")
    code, _, err = run(capsys, "eval", "--config", vq)
    assert code == EXIT_USAGE and "mode" in err


def test_same_seed_same_metrics(tmp_path, capsys):
    logs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        cfg = write_config(tmp_path / name, epochs=5, milestones=[2, 4, 6])
        assert run(capsys, "train", "--config", cfg, "--seed", "3")[0] == EXIT_OK
        logs.append((tmp_path / name / "run" / "metrics.jsonl").read_text())
    assert logs[0] == logs[1]
    (tmp_path / "c").mkdir()
    cfg = write_config(tmp_path / "c", epochs=5, milestones=[2, 4, 6])
    run(capsys, "train", "--config", cfg, "--seed", "4")
    assert (tmp_path / "c" / "run" / "metrics.jsonl").read_text() != logs[0]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "vqloco.cli", "eval", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--config", "--seed", "--policy"):
        assert flag in res.stdout
