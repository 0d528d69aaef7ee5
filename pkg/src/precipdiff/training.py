"""Training loop, EMA tracking, checkpointing, and resume logic.

Checkpoints are single container files carrying the resolved config, an
architecture fingerprint (validated before any compute on load), live and
EMA parameters, optimizer and LR-scheduler state, the noise generator
state, and the step counter, so a resumed run reproduces the uninterrupted
trajectory exactly.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, config_from_dict, config_hash, config_to_dict
from .data import NormSpec, SyntheticDataset, build_dataset
from .errors import DataError, NumericsError
from .nets import EmaShadow, build_model
from .pipeline import Pipeline
from .schedule import build_schedule

CHECKPOINT_FORMAT = "precipdiff-checkpoint"


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def load_ingest_norm(directory: str | Path) -> NormSpec:
    """Normalization constants for a file-ingestion directory (norm.json)."""
    path = Path(directory) / "norm.json"
    if not path.is_file():
        raise DataError(
            f"file ingestion needs normalization constants at {path} "
            '(JSON with keys "epsilon", "lo", "hi")'
        )
    raw = json.loads(path.read_text())
    return NormSpec(epsilon=raw["epsilon"], lo=raw["lo"], hi=raw["hi"])


def build_training_dataset(cfg: RunConfig, split: str = "train"):
    if cfg.data.mode == "files":
        return build_dataset(None, ingest_dir=cfg.data.ingest_dir,
                             norm=load_ingest_norm(cfg.data.ingest_dir))
    spec = cfg.data.synthetic_spec(cfg.train.frames, cfg.train.seed)
    if cfg.ablation == "single_channel":
        spec = dataclasses.replace(spec, channels=1)
    n = cfg.data.n_train if split == "train" else cfg.data.n_eval
    return SyntheticDataset(spec, split=split, n_sequences=n)


def build_pipeline(cfg: RunConfig) -> Pipeline:
    """Model plus schedule for the configured pipeline variant.

    Model initialization is seeded from the training seed so two builds from
    the same config are parameter-identical.
    """
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.arch, cfg.data.channels, cfg.data.scale,
                        cfg.schedule.n_steps, ablation=cfg.ablation)
    schedule = build_schedule(cfg.schedule.n_steps, cfg.schedule.kind,
                              beta_start=cfg.schedule.beta_start,
                              beta_end=cfg.schedule.beta_end)
    weights = (cfg.train.w_diff, cfg.train.w_flow, cfg.train.w_swin)
    return Pipeline(model, schedule, mode=cfg.ablation, loss_weights=weights)


def save_checkpoint(path: str | Path, *, cfg: RunConfig, model, ema: EmaShadow,
                    optimizer, lr_sched, step: int, noise_gen: torch.Generator,
                    norm: NormSpec) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "package_version": __version__,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "arch_fingerprint": model.arch_fingerprint(),
        "model": model.state_dict(),
        "ema": ema.state_dict(),
        "optimizer": optimizer.state_dict(),
        "lr_sched": lr_sched.state_dict(),
        "step": step,
        "noise_gen": noise_gen.get_state(),
        "norm": {"epsilon": norm.epsilon, "lo": norm.lo, "hi": norm.hi},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"checkpoint {path} is unreadable or corrupt: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    required = {"config", "model", "ema", "optimizer", "lr_sched", "step",
                "noise_gen", "norm", "arch_fingerprint"}
    missing = required - set(payload)
    if missing:
        raise DataError(f"checkpoint {path} lacks fields {sorted(missing)}")
    return payload


def restore_model(payload: dict):
    """Rebuild (cfg, pipeline, ema) from a checkpoint payload, shape-checked."""
    cfg = config_from_dict(payload["config"])
    pipe = build_pipeline(cfg)
    fingerprint = pipe.model.arch_fingerprint()
    if fingerprint != payload["arch_fingerprint"]:
        diffs = {
            k: (payload["arch_fingerprint"].get(k), fingerprint.get(k))
            for k in set(fingerprint) | set(payload["arch_fingerprint"])
            if payload["arch_fingerprint"].get(k) != fingerprint.get(k)
        }
        raise DataError(f"checkpoint/arch mismatch (checkpoint vs config): {diffs}")
    pipe.model.load_state_dict(payload["model"])
    ema = EmaShadow(pipe.model, payload["ema"]["decay"])
    ema.load_state_dict(payload["ema"])
    return cfg, pipe, ema


def train_run(cfg: RunConfig, out_dir: str | Path, resume: str | Path | None = None) -> Path:
    """Run (or resume) training; returns the final checkpoint path.

    Writes a rolling ``checkpoint.pt`` every ``checkpoint_every`` steps and an
    append-only ``loss_log.csv`` with one row per optimizer step. A
    non-finite loss aborts without touching the last good checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    log_path = out_dir / "loss_log.csv"

    dataset = build_training_dataset(cfg)
    pipe = build_pipeline(cfg)
    model = pipe.model
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=cfg.train.steps, eta_min=cfg.train.lr_final
    )
    ema = EmaShadow(model, cfg.train.ema_decay)
    noise_gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    start_step = 0

    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["config_hash"] != config_hash(cfg):
            raise DataError(
                "resume checkpoint was produced by a different config "
                f"({payload['config_hash']} vs {config_hash(cfg)})"
            )
        model.load_state_dict(payload["model"])
        ema.load_state_dict(payload["ema"])
        optimizer.load_state_dict(payload["optimizer"])
        lr_sched.load_state_dict(payload["lr_sched"])
        noise_gen.set_state(payload["noise_gen"])
        start_step = payload["step"]
    if not log_path.exists():
        log_path.write_text("step,l_diff,l_flow,l_swin,lr\n")

    model.train()
    norm = dataset.norm
    for step in range(start_step, cfg.train.steps):
        batch = dataset[step % len(dataset)]
        optimizer.zero_grad(set_to_none=True)
        losses = pipe.training_step(batch, noise_gen)
        optimizer.step()
        ema.update(model)
        lr = optimizer.param_groups[0]["lr"]
        lr_sched.step()
        with open(log_path, "a") as fh:
            fh.write(f"{step},{losses.l_diff!r},{losses.l_flow!r},{losses.l_swin!r},{lr!r}\n")
        done = step + 1
        if done % cfg.train.checkpoint_every == 0 or done == cfg.train.steps:
            save_checkpoint(ckpt_path, cfg=cfg, model=model, ema=ema,
                            optimizer=optimizer, lr_sched=lr_sched, step=done,
                            noise_gen=noise_gen, norm=norm)
            if done < cfg.train.steps:
                # periodic snapshot stays addressable for later resumes
                save_checkpoint(out_dir / f"checkpoint_{done:06d}.pt", cfg=cfg,
                                model=model, ema=ema, optimizer=optimizer,
                                lr_sched=lr_sched, step=done, noise_gen=noise_gen,
                                norm=norm)
    return ckpt_path
