import csv
import json

import numpy as np
import pytest

from asyncdfl import cli
from asyncdfl.config import RunConfig, dump_spec, parse_config, parse_config_text
from asyncdfl.errors import ConfigError
from asyncdfl.topology import build_topology

SMALL = """\
n_devices: 3
max_updates: 3
data:
  n_classes: 3
  dims: 4
  n_samples: 600
training:
  local_epochs: 1
simulation:
  eval_interval: 0.05
experiment:
  variants: [none, rl_dwu]
  seeds: [0, 1]
  output_dir: out
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_empty_file_gives_documented_defaults(tmp_path):
    spec = parse_config(write(tmp_path, ""))
    r = spec.run
    assert r.training.lr == 0.03
    assert r.training.batch_size == 50
    assert r.training.local_epochs == 4
    assert r.data.alpha == 0.5
    assert r.pruning.C == 1.5
    assert r.simulation.speed_ratio == 15.0
    assert r.pruning.p_max == 0.8
    assert spec.experiment.seeds == [0]


def test_negative_learning_rate_names_key_and_line():
    with pytest.raises(ConfigError, match=r"training\.lr \(line 3\)"):
        parse_config_text("n_devices: 4\ntraining:\n  lr: -0.1\n")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match=r"pruning\.cadense \(line 2\): unknown key"):
        parse_config_text("pruning:\n  cadense: 5\n")


@pytest.mark.parametrize("text", [
    "n_devices: 2.5\n",
    "topology: torus\n",
    "simulation:\n  speed_ratio: 0.5\n",
    "pruning:\n  p_max: 1.0\n",
    "experiment:\n  variants: [nope]\n",
    "experiment:\n  seeds: []\n",
    "- a list\n",
    "n_devices: [\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_round_trip():
    spec = parse_config_text(SMALL)
    again = parse_config_text(dump_spec(spec))
    assert again == spec
    assert dump_spec(again) == dump_spec(spec)


def test_variant_switches():
    base = RunConfig()
    v = base.variant("rl_dwu")
    assert (v.selection.enabled, v.aggregation.dynamic_weights, v.pruning.enabled) == (True, True, False)
    assert base.pruning.enabled
    with pytest.raises(ConfigError):
        base.variant("bogus")


def test_run_fans_out_seeds_and_variants(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", write(tmp_path, SMALL)]) == cli.EXIT_OK
    out = tmp_path / "root" / "out"
    runs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert runs == ["none_seed0", "none_seed1", "rl_dwu_seed0", "rl_dwu_seed1"]
    for name in runs:
        assert (out / name / "metrics.csv").exists()
        summary = json.loads((out / name / "summary.json").read_text())
        assert summary["seed"] == int(name[-1])
    agg = read_csv(out / "aggregate.csv")
    per_run = read_csv(out / "runs.csv")
    assert len(per_run) == 4
    for row in agg:
        mine = [r for r in per_run if r["variant"] == row["variant"]]
        accs = [float(r["final_acc"]) for r in mine]
        assert float(row["acc_mean"]) == pytest.approx(np.mean(accs), rel=1e-12)
        assert float(row["mflops"]) == pytest.approx(np.mean([float(r["mflops"]) for r in mine]), rel=1e-12)
        assert float(row["bytes"]) == pytest.approx(np.mean([float(r["bytes"]) for r in mine]), rel=1e-12)
        assert int(row["runs"]) == 2
    assert parse_config(str(out / "experiment.yaml")) == parse_config_text(SMALL)


def test_unreachable_target_reported_as_slash(tmp_path):
    text = SMALL.replace("output_dir: out", "output_dir: out\n  target_accuracy: 1.01")
    assert cli.main(["run", write(tmp_path, text), "--out", str(tmp_path)]) == cli.EXIT_OK
    assert all(r["time_to_target"] == "/" for r in read_csv(tmp_path / "out" / "runs.csv"))
    assert all(r["time_to_target"] == "/" for r in read_csv(tmp_path / "out" / "aggregate.csv"))


def test_reachable_target_is_a_time(tmp_path):
    text = SMALL.replace("output_dir: out", "output_dir: out\n  target_accuracy: 0.0")
    cli.main(["run", write(tmp_path, text), "--out", str(tmp_path)])
    for r in read_csv(tmp_path / "out" / "runs.csv"):
        assert float(r["time_to_target"]) == 0.0


def test_summarize_runs_slash_and_failures():
    recs = [
        {"variant": "a", "seed": 0, "final_acc": 0.5, "time_to_target": 2.0, "mflops": 1.0, "bytes": 10, "status": "ok"},
        {"variant": "a", "seed": 1, "final_acc": 0.7, "time_to_target": "/", "mflops": 3.0, "bytes": 30, "status": "ok"},
        {"variant": "a", "seed": 2, "final_acc": float("nan"), "time_to_target": "/", "mflops": float("nan"),
         "bytes": float("nan"), "status": "failed: boom"},
        {"variant": "b", "seed": 0, "final_acc": 0.9, "time_to_target": 4.0, "mflops": 2.0, "bytes": 5, "status": "ok"},
    ]
    out = {r["variant"]: r for r in cli.summarize_runs(recs)}
    assert out["a"]["runs"] == 2
    assert out["a"]["acc_mean"] == pytest.approx(0.6)
    assert out["a"]["time_to_target"] == "/"
    assert out["b"]["time_to_target"] == 4.0


def test_sweep_overrides_seeds(tmp_path):
    rc = cli.main(["sweep", write(tmp_path, SMALL), "--seeds", "5", "--out", str(tmp_path)])
    assert rc == cli.EXIT_OK
    runs = read_csv(tmp_path / "out" / "runs.csv")
    assert {r["seed"] for r in runs} == {"5"}


def test_failed_run_gives_exit_one(tmp_path, monkeypatch):
    def boom(cfg, variant):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(cli, "run_one", boom)
    assert cli.main(["run", write(tmp_path, SMALL), "--out", str(tmp_path)]) == cli.EXIT_RUN_FAILED
    runs = read_csv(tmp_path / "out" / "runs.csv")
    assert all(r["status"].startswith("failed") for r in runs)


def test_config_error_gives_exit_two(tmp_path, capsys):
    assert cli.main(["run", write(tmp_path, "training:\n  lr: -1\n")]) == cli.EXIT_CONFIG
    assert "training.lr" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    assert cli.main(["plotdata", str(tmp_path / "nowhere")]) == cli.EXIT_CONFIG


def test_plotdata_rows(tmp_path):
    cli.main(["run", write(tmp_path, SMALL), "--out", str(tmp_path)])
    out = tmp_path / "out"
    assert cli.main(["plotdata", str(out)]) == cli.EXIT_OK
    rows = read_csv(out / "plotdata.csv")
    series = {r["series"] for r in rows}
    assert {"test_acc_avg", "consensus_global", "density"} <= series
    keys = [(r["series"], float(r["x"]), r["run"]) for r in rows]
    assert keys == sorted(keys)
    evals = 0
    for run_dir in out.iterdir():
        if run_dir.is_dir():
            evals += sum(1 for r in read_csv(run_dir / "metrics.csv") if r["device"] == "-1")
    assert len(rows) == evals * len(cli.PLOT_SERIES)


def test_topo_dump(tmp_path, capsys):
    assert cli.main(["topo-dump", write(tmp_path, "n_devices: 8\n")]) == cli.EXIT_OK
    text = capsys.readouterr().out
    A = np.loadtxt(text.splitlines(), delimiter=",")
    np.testing.assert_array_equal(A > 0, build_topology("exponential", 8).adjacency > 0)
