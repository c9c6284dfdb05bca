import json

import pytest

from ivmqr.cli import EXIT_ERROR, EXIT_FAIL, EXIT_PASS, main


def write_config(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(json.dumps(body, indent=2), encoding="utf-8")
    return str(path)


def identification_config(compliance, bounds):
    return {
        "schema_version": 1,
        "command": "check-identification",
        "model": {"kind": "identity", "compliance": compliance, "eigen_bounds": bounds},
        "pair_resolution": 10,
        "grid_resolution": 4,
        "quadratic_form_points": 5,
    }


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.delenv("IVMQR_OUT", raising=False)


def test_high_compliance_passes(tmp_path, capsys):
    config = write_config(tmp_path, "high.json", identification_config(0.9, [0.75, 1.5]))
    out = tmp_path / "high"
    assert main(["check-identification", "--config", config, "--out", str(out)]) == EXIT_PASS
    printed = capsys.readouterr().out
    assert "condition-12: PASS margin=2.92 " in printed
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is True
    assert report["command"] == "check-identification"
    assert report["config"]["pair_resolution"] == 10
    assert (out / "conditions.csv").exists()
    assert (out / "supports.csv").exists()


def test_low_compliance_fails_condition(tmp_path, capsys):
    config = write_config(tmp_path, "low.json", identification_config(0.7, [0.5, 2.0]))
    out = tmp_path / "low"
    assert main(["check-identification", "--config", config, "--out", str(out)]) == EXIT_FAIL
    assert "condition-12: FAIL margin=-21.08 " in capsys.readouterr().out
    assert json.loads((out / "report.json").read_text())["passed"] is False


def test_output_directory_from_environment(tmp_path, monkeypatch):
    config = write_config(tmp_path, "high.json", identification_config(0.9, [0.75, 1.5]))
    monkeypatch.setenv("IVMQR_OUT", str(tmp_path / "env"))
    assert main(["check-identification", "--config", config, "--out", str(tmp_path / "flag")]) == EXIT_PASS
    assert (tmp_path / "env" / "report.json").exists()
    assert not (tmp_path / "flag").exists()


def test_malformed_config_is_an_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "schema_version": 1\n  "model": {}\n}\n', encoding="utf-8")
    assert main(["check-identification", "--config", str(path)]) == EXIT_ERROR
    assert "ivmqr: error: line 3" in capsys.readouterr().err


def test_invalid_model_is_an_error(tmp_path, capsys):
    body = identification_config(0.9, [1.1, 1.5])
    config = write_config(tmp_path, "outside.json", body)
    assert main(["check-identification", "--config", config, "--out", str(tmp_path)]) == EXIT_ERROR
    assert "ivmqr: error:" in capsys.readouterr().err


def test_threads_must_be_positive(tmp_path):
    config = write_config(tmp_path, "high.json", identification_config(0.9, [0.75, 1.5]))
    assert main(["check-identification", "--config", config, "--threads", "0"]) == EXIT_ERROR


def test_validate(tmp_path, capsys):
    config = write_config(tmp_path, "high.json", identification_config(0.9, [0.75, 1.5]))
    assert main(["validate", "--config", config]) == EXIT_PASS
    assert capsys.readouterr().out.startswith("valid: Valid Check Identification Conditions config")
    assert main(["validate", "--config", config, "--command", "simulate"]) == EXIT_ERROR
    assert capsys.readouterr().out.startswith("invalid: ")
    assert main(["validate", "--config", str(tmp_path / "missing.json")]) == EXIT_ERROR


def simulate_config(tmp_path):
    return write_config(tmp_path, "sim.json", {
        "schema_version": 1,
        "command": "simulate",
        "seed": 3,
        "model": {"kind": "example1", "A1": [[1.0, 0.0], [0.0, 1.25]]},
        "n": 2_000,
    })


def test_simulate_is_reproducible(tmp_path):
    config = simulate_config(tmp_path)
    for name, threads in (("one", "1"), ("four", "4")):
        assert main(["simulate", "--config", config, "--out", str(tmp_path / name), "--threads", threads]) == EXIT_PASS
    first = (tmp_path / "one" / "sample.csv").read_bytes()
    assert first == (tmp_path / "four" / "sample.csv").read_bytes()
    assert (tmp_path / "one" / "report.json").read_bytes() == (tmp_path / "four" / "report.json").read_bytes()


def test_seed_override_changes_sample(tmp_path):
    config = simulate_config(tmp_path)
    main(["simulate", "--config", config, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", config, "--out", str(tmp_path / "b"), "--seed", "4"])
    assert (tmp_path / "a" / "sample.csv").read_bytes() != (tmp_path / "b" / "sample.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "report.json").read_text())["config"]["seed"] == 4
