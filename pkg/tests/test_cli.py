import json
import os

import pytest

from attitude_pinn.cli import MANIFEST, load_config, main, ConfigError
from attitude_pinn.eval import CONTROLLERS

GEN = "campaign:\n  n_perturbed: 1\n  duration: 20.0\n"
TRAIN = "train.epochs: 3\ntrain.batch_size: 512\n"
MC = "noise:\n  horizon: 70.0\n  steady_window: 10.0\n  n_runs: 2\n"


def write(path, text):
    path.write_text(text)
    return str(path)


def artifacts(d):
    """Every output file except the append-only run manifest, as bytes."""
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f != MANIFEST:
                p = os.path.join(root, f)
                out[os.path.relpath(p, d)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = {name: write(base / f"{name}.yaml", text)
           for name, text in (("gen", GEN), ("train", TRAIN), ("mc", MC))}
    for tag in ("d1", "d2"):
        assert main(["gen-data", "--config", cfg["gen"], "--runs", "2", "--seed", "3",
                     "--out", str(base / tag)]) == 0
    assert main(["gen-data", "--config", cfg["gen"], "--runs", "2", "--seed", "4",
                 "--out", str(base / "other")]) == 0
    data = str(base / "d1" / "dataset.txt")
    for tag in ("dd1", "dd2"):
        assert main(["train", "--config", cfg["train"], "--dataset", data, "--mode", "dd",
                     "--seed", "0", "--out", str(base / tag)]) == 0
    assert main(["train", "--config", cfg["train"], "--dataset", data, "--mode", "ld",
                 "--dd-model", str(base / "dd1" / "model.apinn"), "--seed", "0",
                 "--out", str(base / "ld")]) == 0
    return base, cfg


def history(path):
    rows = [ln.split("\t") for ln in open(path).read().splitlines()]
    head = rows[0]
    return [dict(zip(head, r)) for r in rows[1:] if r[0] != "final"]


def test_gen_data_is_byte_identical(work):
    base, _ = work
    a, b = artifacts(base / "d1"), artifacts(base / "d2")
    assert set(a) == {"dataset.txt", "normalization.json"}
    assert a == b
    assert artifacts(base / "other") != a


def test_train_is_byte_identical(work):
    base, _ = work
    a, b = artifacts(base / "dd1"), artifacts(base / "dd2")
    assert {"model.apinn", "history.tsv"} <= set(a)
    assert a == b


def test_manifest_records_every_invocation(work, tmp_path):
    base, cfg = work
    out = str(tmp_path / "g")
    for _ in range(2):
        assert main(["gen-data", "--config", cfg["gen"], "--runs", "2", "--seed", "3",
                     "--out", out]) == 0
    entries = json.load(open(os.path.join(out, MANIFEST)))["entries"]
    assert len(entries) == 2
    assert entries[0]["artifacts"] == entries[1]["artifacts"]
    assert entries[0]["seeds"] == {"campaign": 3, "split": 3}


def test_dd_history_pins_beta(work):
    base, _ = work
    rows = history(base / "dd1" / "history.tsv")
    assert len(rows) == 3
    assert all(float(r["beta"]) == 0.0 for r in rows)


def test_ld_history_moves_beta(work):
    base, _ = work
    betas = [float(r["beta"]) for r in history(base / "ld" / "history.tsv")]
    assert len(set(betas)) > 1
    assert all(0.0 <= b <= 1.0 for b in betas)


def test_eval_regressor_identical_models(work, tmp_path, capsys):
    base, _ = work
    data = str(base / "d1" / "dataset.txt")
    m = str(base / "dd1" / "model.apinn")
    m2 = str(base / "dd2" / "model.apinn")
    capsys.readouterr()
    assert main(["eval-regressor", "--dataset", data, "--model", m, "--model", m2,
                 "--out", str(tmp_path)]) == 0
    report = open(tmp_path / "regressor_report.tsv").read()
    assert report == capsys.readouterr().out
    lines = report.strip().split("\n")
    assert lines[1].split("\t")[1:] == lines[2].split("\t")[1:]
    p_lines = [ln for ln in lines if ln.startswith("# wilcoxon")]
    assert len(p_lines) == 2 and all(float(ln.split("\t")[1]) == 1.0 for ln in p_lines)


def test_eval_rejects_foreign_normalization(work, tmp_path, capsys):
    base, _ = work
    code = main(["eval-regressor", "--dataset", str(base / "other" / "dataset.txt"),
                 "--model", str(base / "dd1" / "model.apinn"), "--out", str(tmp_path)])
    assert code != 0
    assert "normaliz" in capsys.readouterr().err


def test_mc_is_byte_identical_and_reports(work, tmp_path):
    base, cfg = work
    outs = [str(tmp_path / t) for t in ("a", "b")]
    for o in outs:
        assert main(["mc", "--config", cfg["mc"], "--controller", "linear", "--seed", "1",
                     "--out", o]) == 0
    a, b = artifacts(outs[0]), artifacts(outs[1])
    assert a == b
    assert {"summary.tsv", "runs.tsv", "traces/run_0000.tsv", "traces/run_0001.tsv"} <= set(a)
    head = a["summary.tsv"].decode().split("\n")[0].split("\t")
    assert head[0] == "controller" and "settling_time_median_s" in head


def test_simulate_single_run(work, tmp_path):
    _, cfg = work
    assert main(["simulate", "--config", cfg["mc"], "--controller", "nonlinear",
                 "--out", str(tmp_path)]) == 0
    runs = open(tmp_path / "runs.tsv").read().strip().split("\n")
    assert len(runs) == 2


def test_unknown_controller_lists_tags(tmp_path, capsys):
    assert main(["mc", "--controller", "pid", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert all(tag in err for tag in CONTROLLERS)


def test_mlp_controller_needs_model(tmp_path):
    assert main(["mc", "--controller", "mlp-ld", "--out", str(tmp_path)]) == 1


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["gen-data", "--out", str(tmp_path)]) == 1  # no simulation count
    assert main(["train", "--mode", "ld", "--out", str(tmp_path)]) == 1  # no dataset
    assert main(["gen-data", "--runs", "1", "--jobs", "0", "--out", str(tmp_path)]) == 1
    assert "missing required config key" in capsys.readouterr().err


def test_config_errors(tmp_path):
    bad = write(tmp_path / "bad.yaml", "campaign.bogus: 1\n")
    assert main(["gen-data", "--config", bad, "--runs", "1", "--out", str(tmp_path)]) == 1
    junk = write(tmp_path / "junk.yaml", "[1, 2\n")
    assert main(["gen-data", "--config", junk, "--runs", "1", "--out", str(tmp_path)]) == 1
    typed = write(tmp_path / "typed.yaml", "campaign.duration: soon\n")
    assert main(["gen-data", "--config", typed, "--runs", "1", "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "missing.yaml"), "--runs", "1",
                 "--out", str(tmp_path)]) == 1


def test_flags_override_file_keys(tmp_path):
    path = write(tmp_path / "c.yaml", "campaign:\n  n_simulations: 7\n  duration: 20.0\n")
    cfg = load_config("gen-data", path, {"campaign.n_simulations": 2})
    assert cfg["campaign.n_simulations"] == 2 and cfg["campaign.duration"] == 20.0
    cfg = load_config("gen-data", path, {"campaign.n_simulations": None})
    assert cfg["campaign.n_simulations"] == 7
    with pytest.raises(ConfigError):
        load_config("gen-data", None, {})


def test_missing_dataset_is_config_error(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope.txt"), "--mode", "dd",
                 "--out", str(tmp_path)]) == 1
