import json
import subprocess
import sys

import numpy as np
import pytest

from jumpdiff import cli
from jumpdiff.checks import CheckResult
from jumpdiff.datasets import read_states
from jumpdiff.sampler import ThinningError

CONFIG = """
version = 1
[schedule]
max_components = 2
component_dim = 1
[arch]
hidden = 8
[train]
steps = 4
batch_size = 8
[sampler]
dt = 0.02
C = 1
thinning = "clip"
block_size = 8
"""


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "run.toml").write_text(CONFIG)
    assert cli.main(["gen-data", "--kind", "toy2", "--size", "64", "--seed", "1",
                     "--out", str(tmp_path / "data.jsonl")]) == 0
    return tmp_path


def train(d, name="model.json", *extra):
    return cli.main(["train", "--config", str(d / "run.toml"), "--data", str(d / "data.jsonl"),
                     "--out", str(d / name), *extra])


def test_gen_data_params_and_determinism(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for path in (a, b):
        assert cli.main(["gen-data", "--kind", "toy2", "--size", "50", "--param", "w1=1.0",
                         "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert all(s.n == 1 for s in read_states(a))


@pytest.mark.parametrize("argv", [
    ["gen-data", "--kind", "toy2", "--param", "w1=2", "--out", "{d}/x.jsonl"],
    ["gen-data", "--param", "w1", "--out", "{d}/x.jsonl"],
    ["gen-data", "--size", "-3", "--out", "{d}/x.jsonl"],
    ["gen-data", "--param", "bogus=1", "--out", "{d}/x.jsonl"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert cli.main([a.format(d=tmp_path) for a in argv]) == 2


def test_bad_run_config_exit_2(run_dir):
    (run_dir / "run.toml").write_text(CONFIG.replace("hidden = 8", "hidden = 8\nwidth = 2"))
    assert train(run_dir) == 2
    (run_dir / "run.toml").write_text(CONFIG.replace("version = 1", ""))
    assert train(run_dir) == 2


def test_io_errors_exit_4(run_dir):
    assert cli.main(["train", "--config", str(run_dir / "run.toml"), "--data", str(run_dir / "nope.jsonl"),
                     "--out", str(run_dir / "m.json")]) == 4
    assert cli.main(["train", "--config", str(run_dir / "missing.toml"), "--data",
                     str(run_dir / "data.jsonl"), "--out", str(run_dir / "m.json")]) == 4
    (run_dir / "broken.json").write_text("{not json")
    assert cli.main(["sample", "--checkpoint", str(run_dir / "broken.json"), "--out",
                     str(run_dir / "s.jsonl")]) == 4
    assert cli.main(["gen-data", "--out", str(run_dir / "no" / "such" / "dir.jsonl")]) == 4


def test_bad_thread_env_exit_2(run_dir, monkeypatch):
    monkeypatch.setenv("JUMPDIFF_THREADS", "lots")
    assert cli.main(["gen-data", "--out", str(run_dir / "x.jsonl")]) == 2


def test_check_failure_exit_3(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda name, seed: [CheckResult("fake", 1.0, 0.5, False)])
    assert cli.main(["check", "dims"]) == 3
    assert "FAIL fake" in capsys.readouterr().out


def test_check_dims_passes(tmp_path, capsys):
    out = tmp_path / "dims.json"
    assert cli.main(["check", "dims", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert len(rows) == 9 and all(r["passed"] for r in rows)
    assert capsys.readouterr().out.count("PASS") == 9


def test_pipeline_is_byte_reproducible(run_dir):
    d = run_dir
    for tag in ("a", "b"):
        assert train(d, f"m_{tag}.json", "--metrics", str(d / f"metrics_{tag}.csv")) == 0
        assert cli.main(["sample", "--checkpoint", str(d / f"m_{tag}.json"), "--config", str(d / "run.toml"),
                         "--count", "12", "--seed", "3", "--out", str(d / f"s_{tag}.jsonl"),
                         "--trace", str(d / f"t_{tag}.csv")]) == 0
        assert cli.main(["eval", "--samples", str(d / f"s_{tag}.jsonl"), "--data", str(d / "data.jsonl"),
                         "--out", str(d / f"e_{tag}.json")]) == 0
    for stem in ("m_{}.json", "metrics_{}.csv", "s_{}.jsonl", "t_{}.csv", "e_{}.json"):
        assert (d / stem.format("a")).read_bytes() == (d / stem.format("b")).read_bytes(), stem
    header = (d / "metrics_a.csv").read_text().splitlines()[0]
    assert header == "step,score_term,rate_neg_term,rate_log_term,ins_loglik_term,ce_term,total,clamp_count"
    report = json.loads((d / "e_a.json").read_text())
    assert report["n_samples"] == 12 and 0 <= report["hellinger"] <= 1


def test_guided_sampling_and_eval(run_dir, capsys):
    d = run_dir
    assert train(d) == 0
    (d / "obs.jsonl").write_text("[1.0]\n")
    assert cli.main(["sample", "--checkpoint", str(d / "model.json"), "--count", "6", "--dt", "0.02",
                     "--observe", str(d / "obs.jsonl"), "--out", str(d / "g.jsonl")]) == 0
    assert len(read_states(d / "g.jsonl")) == 6
    assert cli.main(["eval", "--samples", str(d / "g.jsonl"), "--data", str(d / "data.jsonl"),
                     "--observe", str(d / "obs.jsonl"), "--bandwidth", "0.3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert "hellinger_conditional" in report


def test_guidance_shape_checked(run_dir):
    d = run_dir
    assert train(d) == 0
    (d / "obs.jsonl").write_text("[1.0, 2.0]\n")
    assert cli.main(["sample", "--checkpoint", str(d / "model.json"), "--observe", str(d / "obs.jsonl"),
                     "--out", str(d / "g.jsonl")]) == 2


def test_thinning_violation_is_config_error(run_dir, monkeypatch):
    d = run_dir
    assert train(d) == 0

    def too_fast(*args, **kwargs):
        raise ThinningError("insertion rate * dt = 1.5 >= 1")

    monkeypatch.setattr(cli, "sample", too_fast)
    assert cli.main(["sample", "--checkpoint", str(d / "model.json"), "--out", str(d / "s.jsonl")]) == 2
    assert not (d / "s.jsonl").exists()


def test_eval_shape_mismatch(run_dir):
    d = run_dir
    assert cli.main(["gen-data", "--kind", "clusters", "--size", "10", "--out", str(d / "c.jsonl")]) == 0
    assert cli.main(["eval", "--samples", str(d / "c.jsonl"), "--data", str(d / "data.jsonl")]) == 2


def test_observation_file_formats(tmp_path):
    p = tmp_path / "o.jsonl"
    p.write_text('{"x": [1.0], "slot": -1}\n{"x": [2.0], "slot": 1}\n')
    obs, slots = cli.read_observations(p)
    np.testing.assert_array_equal(obs, [[1.0], [2.0]])
    np.testing.assert_array_equal(slots, [-1, 1])
    p.write_text('{"x": [1.0], "slot": 2}\n[3.0]\n')
    with pytest.raises(ValueError):
        cli.read_observations(p)


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.jsonl"
    res = subprocess.run([sys.executable, "-m", "jumpdiff", "gen-data", "--size", "3", "--out", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and len(out.read_text().splitlines()) == 4
