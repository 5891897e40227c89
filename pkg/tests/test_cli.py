import json

import numpy as np
import pytest

from curbside import io
from curbside.cli import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_DATA, EXIT_OK, main, parse_args
from curbside.ingest import write_csv
from conftest import make_records


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert main(["synth", "--days", "60", "--episodes", "20", "--seed", "4", "--out", str(out)]) == EXIT_OK
    assert main(["train", "--data", str(out / "dataset.csv"), "--seed", "4", "--out", str(out)]) == EXIT_OK
    return out


def test_synth_writes_outputs(trained):
    for name in ("dataset.csv", "truth_model.json", "truth_noise.json", "injections.json"):
        assert (trained / name).exists()
    assert len(io.read_json(trained / "injections.json", "injections")["injections"]) == 20


def test_train_recovers_truth(trained):
    truth = io.load_model(trained / "truth_model.json")
    model = io.load_model(trained / "model.json")
    assert model.mask_violation() <= 1e-9
    # speed rows are recovered closely; flow rows carry a bias from clamping at zero overnight
    np.testing.assert_allclose(model.a, truth.a, atol=0.1)
    np.testing.assert_allclose(model.b[[1, 3]], truth.b[[1, 3]], atol=1.0)
    np.testing.assert_allclose(model.b[[0, 2]], truth.b[[0, 2]], rtol=0.35, atol=5.0)
    noise = io.load_noise(trained / "noise.json")
    assert all(lo < 0 < hi for lo, hi in zip(noise.lo, noise.hi))
    report = io.read_json(trained / "fit_report.json", "fit_report")
    assert report["n_train"] > 4 * report["n_validation"] * 0.95


def test_control_from_state(trained, tmp_path):
    code = main(["control", "--model", str(trained / "model.json"), "--state", "500,12,150,60",
                 "--volumes", "0.9,0.2", "--steps", "3", "--out", str(tmp_path)])
    assert code == EXIT_OK
    trace = io.read_json(tmp_path / "trace.json", "trace")
    assert len(trace["bins"]) == 4 and trace["bins"][0]["action"] == [1, 0]
    assert "solve_ms" not in trace["bins"][0]


def test_control_from_data_with_timings(trained, tmp_path):
    code = main(["control", "--model", str(trained / "model.json"), "--noise", str(trained / "noise.json"),
                 "--data", str(trained / "dataset.csv"), "--index", "10", "--timings", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "solve_ms" in io.read_json(tmp_path / "trace.json", "trace")["bins"][0]


def test_evaluate_writes_report(trained, tmp_path):
    code = main(["evaluate", "--model", str(trained / "model.json"), "--noise", str(trained / "noise.json"),
                 "--data", str(trained / "dataset.csv"), "--mc-runs", "2", "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = io.read_json(tmp_path / "report.json", "campaign_report")
    assert report["n_scenarios"] >= 15 and report["config"]["eval"]["mc_runs"] == 2
    assert len(io.load_scenario_index(tmp_path / "scenarios.json")) == report["n_scenarios"]
    assert len(io.read_rows(tmp_path / "veh_hours_distribution.csv")) == report["n_scenarios"]
    assert len(io.read_rows(tmp_path / "speed_ratio_by_step.csv")) == 8


def test_zero_scenarios_gives_empty_report(trained, tmp_path):
    assert main(["synth", "--days", "10", "--episodes", "0", "--out", str(tmp_path)]) == EXIT_OK
    code = main(["evaluate", "--model", str(trained / "model.json"), "--data", str(tmp_path / "dataset.csv"),
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = io.read_json(tmp_path / "report.json", "campaign_report")
    assert report["n_scenarios"] == 0 and report["scenarios"] == []
    assert io.read_rows(tmp_path / "speed_ratio_by_step.csv") == []


def test_short_dataset_is_a_data_error(tmp_path):
    write_csv(tmp_path / "short.csv", make_records(50))
    assert main(["train", "--data", str(tmp_path / "short.csv"), "--out", str(tmp_path)]) == EXIT_DATA
    assert not (tmp_path / "model.json").exists()


def test_bad_parameters_fail_before_reading_data(tmp_path):
    missing = str(tmp_path / "nope.csv")
    assert main(["train", "--data", missing, "--rho", "-1"]) == EXIT_CONFIG
    assert main(["train", "--data", missing, "--train-fraction", "0"]) == EXIT_CONFIG
    assert main(["train", "--data", missing]) == EXIT_DATA
    assert main(["synth", "--jobs", "0"]) == EXIT_CONFIG
    assert main(["synth", "--days", "1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["frobnicate"]) == 2


def test_missing_or_corrupt_model(trained, tmp_path):
    args = ["control", "--state", "1,2,3,4", "--volumes", "0.5,0.5", "--out", str(tmp_path)]
    assert main(args + ["--model", str(tmp_path / "none.json")]) == EXIT_DATA
    (tmp_path / "bad.json").write_text('{"schema_version": 1, "kind": "noise_model"}')
    assert main(args + ["--model", str(tmp_path / "bad.json")]) == EXIT_DATA
    assert main(["control", "--model", str(trained / "model.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_non_convergence_exit_code(trained, tmp_path):
    code = main(["train", "--data", str(trained / "dataset.csv"), "--max-iters", "1", "--abs-tol", "1e-14",
                 "--rel-tol", "1e-14", "--rho", "5", "--out", str(tmp_path)])
    assert code == EXIT_CONVERGENCE


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema_version": 1, "rho": 2.5, "max-iters": 77, "low_pct": 5}))
    args = parse_args(["train", "--data", "d.csv", "--config", str(cfg), "--max-iters", "9"])
    assert args.rho == 2.5 and args.max_iters == 9 and args.low_pct == 5.0
    cfg.write_text(json.dumps({"bottleneck_km": [1, 3], "mc_runs": 4}))
    args = parse_args(["evaluate", "--model", "m", "--data", "d", "--config", str(cfg)])
    assert args.bottleneck_km == (1.0, 3.0) and args.mc_runs == 4


@pytest.mark.parametrize("content", ['{"rhoo": 1}', "[1]", "{bad", '{"rho": "abc"}'])
def test_config_file_errors(tmp_path, content):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(content)
    assert main(["train", "--data", "d.csv", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["train", "--data", "d.csv", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
