import csv
import json
import subprocess
import sys

import pytest

from tarc.cli import main
from tarc.config import ConfigError, config_from_dict, config_to_dict, dump_config, parse_config

TINY = {
    "scenario": {"kind": "class_il", "num_classes": 4, "train_per_class": 8, "test_per_class": 4,
                 "image_size": 8, "classes_per_task": 2},
    "methods": ["er", "er+tarc"],
    "train": {"budget_epochs": 1, "batch_size": 4, "buffer_capacity": 6, "flip": False},
    "network": {"hidden_dims": [12, 12], "ssl_proj_dim": 4},
    "metrics": {"corruption": True, "flatness": True, "bias": True, "noisy_label": True,
                "sigma_grid": [0.0, 1.0], "flatness_trials": 1, "noise_rates": [0.0, 0.5],
                "probe_epochs": 2, "corruption_test_samples": 8},
    "seeds": [0, 1],
}


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


def _strip_clock(text):
    return "\n".join(line for line in text.splitlines() if "wall_clock_seconds" not in line)


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.methods == ["er"] and cfg.seeds == [0]
    assert cfg.train.learning_rate == 3e-4 and cfg.train.gamma == 0.9 and cfg.train.tau == 0.07
    assert cfg.network.hidden_dims == [256, 256]
    assert config_from_dict({"scenario": {"kind": "domain_il"}}).network.hidden_dims == [100, 100]


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match=r"config\.train\.learning_rat: unknown key"):
        config_from_dict({"train": {"learning_rat": 0.1}})
    with pytest.raises(ConfigError, match=r"config\.train\.batch_size"):
        config_from_dict({"train": {"batch_size": "32"}})
    with pytest.raises(ConfigError, match=r"methods\[1\]"):
        config_from_dict({"methods": ["er", "er+typo"]})
    with pytest.raises(ConfigError):
        config_from_dict({"scenario": {"kind": "general_il"}, "methods": ["si"]})


def test_round_trip(tmp_path):
    cfg = config_from_dict(TINY)
    dump_config(cfg, tmp_path / "c.json")
    assert config_to_dict(parse_config(tmp_path / "c.json")) == config_to_dict(cfg)


def test_single_method_key():
    assert config_from_dict({"method": "si"}).methods == ["si"]
    with pytest.raises(ConfigError):
        config_from_dict({"method": "si", "methods": ["er"]})


def test_validate_verb(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path / "c.json", TINY))]) == 0
    assert json.loads(capsys.readouterr().out)["methods"] == ["er", "er+tarc"]
    assert main(["validate", str(_write(tmp_path / "bad.json", {"train": {"gama": 0.5}}))]) == 2
    record = json.loads(capsys.readouterr().err)
    assert record["error"] == "ConfigError" and "gama" in record["message"]


def test_run_is_deterministic_and_writes_everything(tmp_path):
    cfg = _write(tmp_path / "c.json", TINY)
    for name in ("a", "b"):
        assert main(["run", str(cfg), "--output-dir", str(tmp_path / name)]) == 0
    for fname in ("report_er.json", "report_er_tarc.json"):
        a = (tmp_path / "a" / fname).read_text()
        b = (tmp_path / "b" / fname).read_text()
        assert _strip_clock(a) == _strip_clock(b)
        report = json.loads(a)
        assert len(report["runs"]) == 2 and "wall_clock_seconds" in report
        assert set(report["runs"][0]["metrics"]) >= {"ece", "corruption", "flatness", "bias", "noisy_label"}
    for fname in ("summary.csv", "reliability.csv", "flatness.csv", "noisy_label.csv", "scenario.json"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()
    with open(tmp_path / "a" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["seed", "method", "scenario", "buffer", "avg_acc", "fwt", "bwt", "ece"]
    assert len(rows) == 4


def test_compare(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(_write(tmp_path / "c.json", TINY)), "--output-dir", str(out)]) == 0
    capsys.readouterr()
    er = str(out / "report_er.json")
    assert main(["compare", er, er, "-o", str(tmp_path / "cmp.csv")]) == 0
    with open(tmp_path / "cmp.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(rows[1][f"delta_{k}"]) == 0.0 for k in ("avg_acc", "fwt", "bwt", "ece"))
    assert (tmp_path / "cmp.md").read_text().startswith("| method")

    other = dict(TINY, scenario=dict(TINY["scenario"], classes_per_task=1))
    assert main(["run", str(_write(tmp_path / "d.json", other)), "--output-dir", str(tmp_path / "o")]) == 0
    capsys.readouterr()
    assert main(["compare", er, str(tmp_path / "o" / "report_er.json")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ReportMismatchError"


def test_run_failure_writes_error_record(tmp_path, capsys):
    bad = dict(TINY, scenario=dict(TINY["scenario"], dataset=str(tmp_path / "nowhere")))
    out = tmp_path / "out"
    assert main(["run", str(_write(tmp_path / "c.json", bad)), "--output-dir", str(out)]) == 1
    record = json.loads((out / "error.json").read_text())
    assert record["stage"] == "run" and record["error"] == "FileNotFoundError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tarc", "validate", str(_write(tmp_path / "c.json", {}))],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["methods"] == ["er"]
