from __future__ import annotations

import json

import numpy as np
import pytest
from click.testing import CliRunner

from randomhorizons import settings

from .. import estimators
from ..cli_app import cli
from ..cli_features.plots import _plot
from ..cli_features.sweeps import parse_lrs
from ..cli_features.verification import VERIFY_K, VERIFY_SEED, _checks
from ..models import ConfigurationError, MalformedCsvError
from ..utils import parse_csv_bytes


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def _train(runner, config_path, out):
    return runner.invoke(cli, ["train", "--config", str(config_path), "--out", str(out)])


# -----------------------------
# train
# -----------------------------

def test_missing_key_exits_with_configuration_error(runner, tiny_document, write_config, tmp_path):
    del tiny_document["train"]["lr"]
    result = _train(runner, write_config(tiny_document), tmp_path / "out")
    assert result.exit_code == 2
    assert "train.lr" in result.output


def test_unknown_key_is_rejected(runner, tiny_document, write_config, tmp_path):
    tiny_document["train"]["learning_rate"] = 0.1
    result = _train(runner, write_config(tiny_document), tmp_path / "out")
    assert result.exit_code == 2
    assert "train.learning_rate" in result.output


def test_incompatible_policy_is_rejected(runner, tiny_document, write_config, tmp_path):
    tiny_document["policy"]["kind"] = "gaussian"
    result = _train(runner, write_config(tiny_document), tmp_path / "out")
    assert result.exit_code == 2


def test_baseline_on_other_estimators_is_rejected(runner, tiny_document, write_config, tmp_path):
    tiny_document["estimator"]["baseline"] = "batch_mean_return"
    result = _train(runner, write_config(tiny_document), tmp_path / "out")
    assert result.exit_code == 2
    assert "baseline applies only to trajectory_pg" in result.output
    assert not (tmp_path / "out").exists()


def test_unreadable_config(runner, tmp_path):
    result = _train(runner, tmp_path / "missing.yaml", tmp_path / "out")
    assert result.exit_code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("env: [unclosed")
    assert _train(runner, bad, tmp_path / "out").exit_code == 2


def test_train_writes_run_directory(runner, tiny_document, write_config, tmp_path):
    out = tmp_path / "out"
    result = _train(runner, write_config(tiny_document), out)
    assert result.exit_code == 0, result.output
    assert "completed 3 iterations" in result.output
    assert len((out / "metrics.csv").read_text().splitlines()) == 4
    assert (out / "final_checkpoint.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert manifest["iterations_completed"] == 3
    assert manifest["failed"] is None
    assert manifest["config"]["train"]["lr"] == 1e-3


def test_rerun_from_manifest_is_byte_identical(runner, tiny_document, write_config, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert _train(runner, write_config(tiny_document), first).exit_code == 0
    assert _train(runner, first / "manifest.json", second).exit_code == 0
    for name in ("metrics.csv", "final_checkpoint.json", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_output_root_prefixes_configured_dir(runner, tiny_document, write_config, tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "OUTPUT_ROOT", str(tmp_path / "root"))
    result = runner.invoke(cli, ["train", "--config", str(write_config(tiny_document))])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "root" / "run" / "metrics.csv").exists()


def test_diverged_run_exits_nonzero_with_manifest(runner, tiny_document, write_config, tmp_path):
    tiny_document["train"]["lr"] = 1e250
    out = tmp_path / "out"
    with np.errstate(all="ignore"):
        result = _train(runner, write_config(tiny_document), out)
    assert result.exit_code == 1
    assert "diverged" in result.output
    assert json.loads((out / "manifest.json").read_text())["failed"]


# -----------------------------
# sweep
# -----------------------------

def test_parse_lrs():
    assert parse_lrs("5e-4, 1e-3,2e-3") == [5e-4, 1e-3, 2e-3]
    for bad in ("", "abc", "1e-3,-1", "nan"):
        with pytest.raises(ConfigurationError):
            parse_lrs(bad)


def test_sweep_writes_summary(runner, tiny_document, write_config, tmp_path):
    out = tmp_path / "sweep"
    result = runner.invoke(cli, ["sweep", "--config", str(write_config(tiny_document)),
                                 "--lrs", "1e-3,2e-3", "--repeats", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0] == "lr,repeat,seed,status,iterations,final_neg_return,final_hitting_time,error"
    assert len(lines) == 1 + 2 * 2
    assert all(",ok,3," in line for line in lines[1:])
    assert (out / "lr_0.001_rep_1" / "manifest.json").exists()


def test_sweep_reports_failed_cells(runner, tiny_document, write_config, tmp_path):
    out = tmp_path / "sweep"
    with np.errstate(all="ignore"):
        result = runner.invoke(cli, ["sweep", "--config", str(write_config(tiny_document)),
                                     "--lrs", "1e-3,1e250", "--out", str(out)])
    assert result.exit_code == 1
    assert "1 of 2 sweep cells failed" in result.output
    assert len((out / "summary.csv").read_text().splitlines()) == 3


def test_sweep_rejects_bad_rates(runner, tiny_document, write_config, tmp_path):
    result = runner.invoke(cli, ["sweep", "--config", str(write_config(tiny_document)),
                                 "--lrs", "fast", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "lrs" in result.output


# -----------------------------
# plot
# -----------------------------

def test_plot_of_header_only_csv_fails(runner, tmp_path):
    csv_path = tmp_path / "metrics.csv"
    csv_path.write_text("iter,mean_return,mean_hitting_time,z_hat,effective_lr,grad_norm,censor_rate,wall_time_s\n")
    result = runner.invoke(cli, ["plot", "--input", str(csv_path), "--kind", "return",
                                 "--out", str(tmp_path / "out.svg")])
    assert result.exit_code == 1
    assert "no data rows" in result.output
    assert not (tmp_path / "out.svg").exists()


def test_plot_of_wrong_header_names_the_problem(tmp_path):
    csv_path = tmp_path / "metrics.csv"
    csv_path.write_text("iter,return\n0,1\n")
    with pytest.raises(MalformedCsvError):
        _plot(csv_path, "return", tmp_path / "out.svg")


def test_plot_single_row_and_determinism(runner, tiny_document, write_config, tmp_path):
    tiny_document["train"]["iterations"] = 1
    out = tmp_path / "run"
    assert _train(runner, write_config(tiny_document), out).exit_code == 0
    for kind in ("return", "effective_lr", "return_time"):
        a, b = tmp_path / f"{kind}_a.svg", tmp_path / f"{kind}_b.svg"
        for target in (a, b):
            result = runner.invoke(cli, ["plot", "--input", str(out / "metrics.csv"), "--kind", kind,
                                         "--out", str(target)])
            assert result.exit_code == 0, result.output
        assert a.read_bytes().lstrip().startswith(b"<?xml")
        assert a.read_bytes() == b.read_bytes()


def test_plot_missing_input(runner, tmp_path):
    result = runner.invoke(cli, ["plot", "--input", str(tmp_path / "none.csv"), "--kind", "return",
                                 "--out", str(tmp_path / "out.svg")])
    assert result.exit_code == 1


# -----------------------------
# occupancy
# -----------------------------

def test_occupancy_and_its_plot(runner, tiny_document, write_config, tmp_path):
    config_path = write_config(tiny_document)
    run = tmp_path / "run"
    assert _train(runner, config_path, run).exit_code == 0
    csv_path = tmp_path / "occupancy.csv"
    result = runner.invoke(cli, ["occupancy", "--config", str(config_path), "--k", "5",
                                 "--checkpoint", str(run / "final_checkpoint.json"),
                                 "--bins", "8", "--out", str(csv_path)])
    assert result.exit_code == 0, result.output
    rows = parse_csv_bytes(csv_path.read_bytes(), "OCCUPANCY")
    assert len(rows) == 64
    assert sum(r["normalized"] for r in rows) == pytest.approx(1.0)

    svg = tmp_path / "occupancy.svg"
    result = runner.invoke(cli, ["plot", "--input", str(csv_path), "--kind", "occupancy", "--out", str(svg)])
    assert result.exit_code == 0, result.output
    assert svg.exists()


def test_occupancy_rejects_mismatched_checkpoint(runner, tiny_document, write_config, tmp_path):
    config_path = write_config(tiny_document)
    run = tmp_path / "run"
    assert _train(runner, config_path, run).exit_code == 0
    wide = dict(tiny_document, env={"kind": "double_well", "alphas": [1.0, 1.0], "max_steps": 10})
    result = runner.invoke(cli, ["occupancy", "--config", str(write_config(wide, "wide.yaml")), "--k", "2",
                                 "--checkpoint", str(run / "final_checkpoint.json"),
                                 "--out", str(tmp_path / "occ.csv")])
    assert result.exit_code == 2


# -----------------------------
# verify
# -----------------------------

def test_verify_identities_pass(runner):
    result = runner.invoke(cli, ["verify", "--k", "4000", "--only", "noise_reconstruction",
                                 "--only", "scaling_identity", "--only", "collapse_pg"])
    assert result.exit_code == 0, result.output
    assert "all 3 checks passed" in result.output


def test_verify_catches_a_broken_estimator(runner, monkeypatch):
    original = estimators.trajectory_pg

    def negated(*args, **kwargs):
        estimate = original(*args, **kwargs)
        return type(estimate)(-estimate.grad, estimate.z_hat, estimate.mean_return,
                              estimate.mean_hitting_time, estimate.censor_rate)

    monkeypatch.setattr(estimators, "trajectory_pg", negated)
    result = runner.invoke(cli, ["verify", "--k", "4000", "--only", "collapse_pg"])
    assert result.exit_code != 0
    assert "FAIL" in result.output
    assert "collapse_pg" in result.output


def test_verify_rejects_small_k(runner):
    assert runner.invoke(cli, ["verify", "--k", "100"]).exit_code == 2


def test_verify_rejects_unknown_check_names(runner):
    result = runner.invoke(cli, ["verify", "--only", "no_such_check", "--only", "collapse_pg"])
    assert result.exit_code == 2
    assert "no_such_check" in result.output
    assert "collapse_pg" not in result.output.split("unknown checks:")[1]


@pytest.mark.slow
def test_full_verification_suite_passes(runner):
    result = runner.invoke(cli, ["verify"])
    assert result.exit_code == 0, result.output
    assert f"all {len(_checks(VERIFY_K, VERIFY_SEED))} checks passed" in result.output

