import json
import os

import numpy as np
import pytest
import torch
import yaml

from precipdiff.cli import main
from precipdiff.config import (
    DATA_DIR_ENV,
    RunConfig,
    config_from_dict,
    config_hash,
    load_config,
)
from precipdiff.data import read_ofdf, write_ofdf
from precipdiff.errors import ConfigError
from precipdiff.training import load_checkpoint, restore_model

TOY = {
    "data": {"height": 8, "width": 8, "scale": 4, "channels": 3, "n_train": 3, "n_eval": 2},
    "arch": {"channel_dim": 8, "channel_multipliers": [1, 2]},
    "schedule": {"n_steps": 40},
    "train": {"steps": 6, "frames": 3, "checkpoint_every": 3},
    "sample": {"steps": 4, "members": 2},
}


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_run")
    cfg_path = root / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(TOY))
    out = root / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    ens = root / "ens"
    assert main(["sample", "--checkpoint", str(out / "checkpoint.pt"),
                 "--out", str(ens)]) == 0
    rep = root / "rep"
    assert main(["evaluate", "--ensemble", str(ens), "--out", str(rep)]) == 0
    return {"root": root, "config": cfg_path, "run": out, "ens": ens, "rep": rep}


# --- config -------------------------------------------------------------------


def test_defaults_reproduce_reference_settings():
    cfg = RunConfig()
    assert cfg.schedule.n_steps == 1400
    assert cfg.schedule.kind == "cosine"
    assert cfg.sample.steps == 20
    assert cfg.train.ema_decay == 0.995
    assert cfg.train.lr == 1e-4 and cfg.train.lr_final == 5e-7
    assert cfg.train.batch_size == 1
    assert cfg.data.scale == 8
    assert cfg.train.frames == 8


def test_unknown_keys_are_rejected_by_name():
    with pytest.raises(ConfigError, match="trian"):
        config_from_dict({"trian": {}})
    with pytest.raises(ConfigError, match="train.stpes"):
        config_from_dict({"train": {"stpes": 10}})


def test_missing_keys_fall_back_to_defaults():
    cfg = config_from_dict({"train": {"steps": 3}})
    assert cfg.train.steps == 3
    assert cfg.train.lr == 1e-4
    assert cfg.arch.channel_dim == 64


def test_config_hash_is_stable_and_sensitive():
    a = config_from_dict(TOY)
    b = config_from_dict(TOY)
    assert config_hash(a) == config_hash(b)
    c = config_from_dict({**TOY, "ablation": "no_flow"})
    assert config_hash(c) != config_hash(a)


def test_env_var_overrides_data_dir(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump(TOY))
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path / "somewhere"))
    cfg = load_config(cfg_path)
    assert cfg.data.mode == "files"
    assert cfg.data.ingest_dir == str(tmp_path / "somewhere")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)


def test_sample_steps_cannot_exceed_depth():
    with pytest.raises(ConfigError):
        config_from_dict({"schedule": {"n_steps": 10}, "sample": {"steps": 11}})


# --- train --------------------------------------------------------------------


def test_train_writes_checkpoint_and_full_log(toy_run):
    assert (toy_run["run"] / "checkpoint.pt").exists()
    rows = (toy_run["run"] / "loss_log.csv").read_text().strip().splitlines()
    assert rows[0] == "step,l_diff,l_flow,l_swin,lr"
    assert len(rows) == 1 + TOY["train"]["steps"]


def test_resume_reproduces_uninterrupted_trajectory(toy_run, tmp_path):
    # resume from the mid-run snapshot of the uninterrupted 6-step run
    cfg_path = tmp_path / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(TOY))
    snapshot = toy_run["run"] / "checkpoint_000003.pt"
    assert snapshot.exists()
    resumed = tmp_path / "resumed"
    code = main(["train", "--config", str(cfg_path), "--out", str(resumed),
                 "--resume", str(snapshot)])
    assert code == 0

    full_rows = (toy_run["run"] / "loss_log.csv").read_text().strip().splitlines()
    resumed_rows = (resumed / "loss_log.csv").read_text().strip().splitlines()
    # steps 3..5 of the resumed run match the uninterrupted run exactly
    assert resumed_rows[-3:] == full_rows[-3:]


def test_resume_rejects_foreign_config(toy_run, tmp_path):
    other = dict(TOY, train=dict(TOY["train"], lr=3e-4))
    cfg_path = tmp_path / "other.yaml"
    cfg_path.write_text(yaml.safe_dump(other))
    code = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o"),
                 "--resume", str(toy_run["run"] / "checkpoint.pt")])
    assert code == 2


def test_corrupt_checkpoint_is_refused(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"this is not a checkpoint")
    assert main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_checkpoint_arch_mismatch_is_detected(toy_run, tmp_path):
    payload = load_checkpoint(toy_run["run"] / "checkpoint.pt")
    payload["arch_fingerprint"]["channel_dim"] = 999
    from precipdiff.errors import DataError

    with pytest.raises(DataError, match="channel_dim"):
        restore_model(payload)


# --- sample --------------------------------------------------------------------


def test_sample_outputs_and_manifest(toy_run):
    ens = toy_run["ens"]
    manifest = json.loads((ens / "manifest.json").read_text())
    assert manifest["members"] == 2
    assert manifest["sampler_steps"] == 4
    assert len(manifest["seeds"]) == 2
    assert (ens / "truth.ofdf").exists()
    for name in manifest["member_files"]:
        x, y, s = read_ofdf(ens / name)
        assert s == 4 and y.shape[1] == 1


def test_sampling_is_bit_reproducible(toy_run, tmp_path):
    again = tmp_path / "ens2"
    assert main(["sample", "--checkpoint", str(toy_run["run"] / "checkpoint.pt"),
                 "--out", str(again)]) == 0
    for name in ("member_000.ofdf", "member_001.ofdf"):
        a = (toy_run["ens"] / name).read_bytes()
        b = (again / name).read_bytes()
        assert a == b


def test_sample_accepts_degenerate_single_member(toy_run, tmp_path):
    out = tmp_path / "one"
    assert main(["sample", "--checkpoint", str(toy_run["run"] / "checkpoint.pt"),
                 "--out", str(out), "--members", "1"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["members"] == 1


def test_sample_from_sequence_file(toy_run, tmp_path):
    out = tmp_path / "from_file"
    assert main(["sample", "--checkpoint", str(toy_run["run"] / "checkpoint.pt"),
                 "--out", str(out), "--input", str(toy_run["ens"] / "truth.ofdf"),
                 "--members", "1"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["source"].endswith("truth.ofdf")


# --- evaluate ----------------------------------------------------------------


def test_report_contents(toy_run):
    rep = toy_run["rep"]
    doc = json.loads((rep / "report.json").read_text())
    assert {"crps", "mse", "emd", "pe"} <= set(doc)
    assert doc["spectra_files"] == ["spectrum_pred.npy", "spectrum_truth.npy",
                                    "power2d_pred.npy", "power2d_truth.npy"]
    for name in doc["spectra_files"]:
        assert (rep / name).exists()
    text = (rep / "report.txt").read_text()
    for key in ("crps=", "mse=", "emd=", "pe=", "config_hash="):
        assert key in text


def test_evaluate_perfect_forecast_scores_zero(toy_run, tmp_path):
    # hand-built degenerate ensemble whose single member is the truth
    ens = tmp_path / "perfect"
    ens.mkdir()
    x, y, _ = read_ofdf(toy_run["ens"] / "truth.ofdf")
    write_ofdf(ens / "truth.ofdf", x, y)
    write_ofdf(ens / "member_000.ofdf", x, y)
    manifest = json.loads((toy_run["ens"] / "manifest.json").read_text())
    manifest.update(members=1, member_files=["member_000.ofdf"], seeds=[0])
    (ens / "manifest.json").write_text(json.dumps(manifest))

    rep = tmp_path / "perfect_rep"
    assert main(["evaluate", "--ensemble", str(ens), "--out", str(rep)]) == 0
    doc = json.loads((rep / "report.json").read_text())
    assert doc["crps"] == 0.0 and doc["mse"] == 0.0
    assert doc["emd"] == 0.0 and doc["pe"] == 0.0


def test_evaluate_names_mismatched_truth(toy_run, tmp_path):
    x, y, _ = read_ofdf(toy_run["ens"] / "truth.ofdf")
    small = tmp_path / "small.ofdf"
    write_ofdf(small, x[:2], y[:2])
    assert main(["evaluate", "--ensemble", str(toy_run["ens"]),
                 "--truth", str(small), "--out", str(tmp_path / "r")]) == 2


# --- plot ---------------------------------------------------------------------


def test_plot_renders_all_panels(toy_run, tmp_path):
    out = tmp_path / "plots"
    assert main(["plot", "--ensemble", str(toy_run["ens"]),
                 "--report", str(toy_run["rep"]), "--out", str(out)]) == 0
    for name in ("histogram.png", "frames.png", "time_mean.png",
                 "spectra_radial.png", "spectra_2d.png"):
        assert (out / name).exists()


def test_plot_missing_inputs_fail_cleanly(tmp_path):
    out = tmp_path / "plots"
    code = main(["plot", "--ensemble", str(tmp_path / "nope"), "--out", str(out)])
    assert code == 2
    assert not out.exists() or not any(out.iterdir())
    # empty directory input: manifest missing
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["plot", "--ensemble", str(empty), "--out", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_plot_requires_some_input(tmp_path):
    assert main(["plot", "--out", str(tmp_path / "o")]) == 1


# --- exit codes ------------------------------------------------------------------


def test_usage_errors_exit_one():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train"]) == 1  # --out is required


def test_missing_config_file_exits_one(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml"),
                 "--out", str(tmp_path / "o")]) == 1
