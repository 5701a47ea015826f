import json

import pytest

from ssmvla.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from ssmvla.data import manifest_hash


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_config_print_and_write(tmp_path, capsys):
    assert main(["config"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["schema_version"] == 1
    assert main(["config", "--out", str(tmp_path / "c.json")]) == EXIT_OK
    assert main(["config", "--config", str(tmp_path / "c.json")]) == EXIT_OK


def test_bad_config_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"ablation": {"lam_frames": 7}}))
    assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_gen_data(tmp_path):
    assert main(["gen-data", "--episodes", "3", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["gen-data", "--episodes", "3", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
    assert main(["gen-data", "--episodes", "4", "--out", str(tmp_path / "a")]) == EXIT_RUNTIME
    assert main(["gen-data", "--episodes", "4", "--out", str(tmp_path / "a"), "--force"]) == EXIT_OK


def test_missing_inputs_are_runtime_errors(tmp_path):
    assert main(["train-lam", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(["viz", "--trace", str(tmp_path / "none"), "--out", str(tmp_path / "g.png")]) == EXIT_RUNTIME


def test_train_vla_needs_lam(tmp_path):
    assert main(["train-vla", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_end_to_end_tiny(tmp_path, capsys):
    from conftest import TINY_RUN

    cfg = dict(TINY_RUN, data={"episodes": 6})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    c = str(tmp_path / "c.json")
    out = tmp_path / "run"
    assert main(["run", "--config", c, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["config_hash"] and report["schema_version"] == 1
    assert len(report["chains"]["per_position"]) == 5
    assert main(["viz", "--trace", str(out / "trace"), "--out", str(tmp_path / "g.png")]) == EXIT_OK
    assert main(["eval", "--data", str(out / "data"), "--vla", str(out / "vla"), "--lam", str(out / "lam"), "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert main(["eval", "--data", str(out / "data"), "--vla", str(out / "vla"), "--out", str(tmp_path / "ev")]) == EXIT_RUNTIME
