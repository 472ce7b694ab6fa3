import json
import os

import pytest

from nclab import harness
from nclab.cli import main
from nclab.randmat import RngStream


def tiny_config(seed=7):
    return {
        "seed": seed,
        "experiments": [
            {"kind": "spectrum", "n_list": [32], "samples": 6},
            {"kind": "gaussdisc-check", "N_list": [1, 2],
             "delta_list": [1.0, 0.25]},
        ],
    }


def test_run_config_writes_csv_and_summary(tmp_path):
    out = tmp_path / "res"
    summary = harness.run_config(tiny_config(), str(out))
    files = sorted(os.listdir(out))
    assert "00_spectrum.csv" in files
    assert "01_gaussdisc-check.csv" in files
    assert "manifest.json" in files and "summary.json" in files
    header = (out / "00_spectrum.csv").read_text().splitlines()[0]
    assert header == "n,sample,m2,m4,m6,m8,opnorm"
    assert "00_spectrum" in summary
    assert summary["01_gaussdisc-check"]["probs_sum_to_one"]["pass"]


def test_resume_skips_completed(tmp_path):
    out = tmp_path / "res"
    harness.run_config(tiny_config(), str(out))
    stamp = (out / "00_spectrum.csv").stat().st_mtime_ns
    harness.run_config(tiny_config(), str(out))
    assert (out / "00_spectrum.csv").stat().st_mtime_ns == stamp  # untouched


def test_changed_config_invalidates_manifest(tmp_path):
    out = tmp_path / "res"
    harness.run_config(tiny_config(seed=7), str(out))
    stamp = (out / "00_spectrum.csv").stat().st_mtime_ns
    harness.run_config(tiny_config(seed=8), str(out))
    assert (out / "00_spectrum.csv").stat().st_mtime_ns != stamp


def test_thread_count_does_not_change_output(tmp_path):
    outs = {}
    config = {
        "seed": 3,
        "experiments": [
            {"kind": "spectrum", "n_list": [16], "samples": 8},
            {"kind": "freeness", "n_list": [8, 16], "samples": 10},
            {"kind": "truncation-check", "instances": 10, "R": 3.0},
        ],
    }
    for threads in (1, 4):
        sub = tmp_path / f"t{threads}"
        harness.run_config(config, str(sub), threads=threads)
        outs[threads] = {name: (sub / name).read_bytes()
                         for name in sorted(os.listdir(sub))
                         if name.endswith(".csv")}
    assert outs[1].keys() == outs[4].keys()
    for name in outs[1]:
        assert outs[1][name] == outs[4][name]


def test_unknown_kind_rejected(tmp_path):
    config = {"seed": 1, "experiments": [{"kind": "nope"}]}
    with pytest.raises(harness.ExperimentError):
        harness.run_config(config, str(tmp_path / "x"))


def test_run_exit_codes(tmp_path):
    assert harness.run(str(tmp_path / "missing.json")) == harness.EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert harness.run(str(bad)) == harness.EXIT_CONFIG
    no_out = tmp_path / "noout.json"
    no_out.write_text(json.dumps({"experiments": []}))
    assert harness.run(str(no_out)) == harness.EXIT_CONFIG
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"experiments": [],
                                "out_dir": str(tmp_path / "o")}))
    assert harness.run(str(good)) == harness.EXIT_OK
    badkind = tmp_path / "badkind.json"
    badkind.write_text(json.dumps(
        {"experiments": [{"kind": "nope"}], "out_dir": str(tmp_path / "o2")}))
    assert harness.run(str(badkind)) == harness.EXIT_CONFIG


def test_empty_experiment_list_gives_empty_manifest(tmp_path):
    out = tmp_path / "empty"
    summary = harness.run_config({"experiments": []}, str(out))
    assert summary == {}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiments"] == {}


def test_env_var_out_dir(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(tiny_config()))
    monkeypatch.setenv("NCLAB_OUT_DIR", str(tmp_path / "envout"))
    assert harness.run(str(cfg_path)) == harness.EXIT_OK
    assert (tmp_path / "envout" / "00_spectrum.csv").exists()


def test_cli_run_and_json_format(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(tiny_config()))
    code = main(["run", "--config", str(cfg_path),
                 "--out-dir", str(tmp_path / "cli"), "--threads", "2",
                 "--format", "json"])
    assert code == 0
    assert (tmp_path / "cli" / "00_spectrum.json").exists()


def test_value_experiment_smoke(tmp_path):
    params = {"kind": "value", "template": "lq", "K": 2, "N": 1, "R": 4.0,
              "n_list": [4], "train_samples": 8, "val_samples": 16,
              "opt": {"max_iters": 25, "chunk": 8}}
    headers, rows, checks = harness.experiment_csv(
        "value", params, RngStream(5), 1)
    assert headers[0] == "K" and len(rows) == 1
    assert checks["below_zero_policy_n4"]["pass"]


def test_sweep_experiment_smoke():
    params = {"kind": "sweep", "template": "quartic", "beta_c": 0.0,
              "pairs": [[1, 1], [2, 2]], "R": 4.0, "n": 4,
              "opt": {"max_iters": 20, "train_samples": 8, "val_samples": 16,
                      "chunk": 8}}
    headers, rows, checks = harness.experiment_csv(
        "sweep", params, RngStream(6), 1)
    assert len(rows) == 2
    assert "successive_diffs" in checks


def test_ldp_experiment_smoke():
    params = {"kind": "ldp", "n": 4, "coef": 0.5, "lhs_samples": 400,
              "time_steps": 4,
              "opt": {"max_iters": 60, "train_samples": 16, "val_samples": 64,
                      "chunk": 8}}
    headers, rows, checks = harness.experiment_csv("ldp", params,
                                                   RngStream(7), 1)
    assert rows[0][0] == "quadratic"
    assert checks["rhs_above_lhs"]["pass"]


def test_bad_optimizer_option_rejected():
    with pytest.raises(harness.ExperimentError):
        harness.experiment_csv(
            "value", {"template": "lq", "opt": {"bogus": 1}}, RngStream(8), 1)
