"""Command-line surface: train, sample, evaluate, and plot.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. All artifact files are written atomically and carry the config
hash of the run that produced them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import config_hash, load_config
from .data import NormSpec, SyntheticDataset, denormalize, read_ofdf, write_ofdf
from .errors import ConfigError, DataError, NumericsError
from .metrics import EnsembleForecast, compute_report, power_spectrum
from .pipeline import Pipeline
from .training import (
    atomic_write_text,
    build_training_dataset,
    load_checkpoint,
    restore_model,
    train_run,
)

MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="precipdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", type=Path, help="YAML run config (defaults if omitted)")
    p_train.add_argument("--out", type=Path, required=True, help="output directory")
    p_train.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p_train.add_argument("--seed", type=int, help="override train.seed")
    p_train.add_argument("--steps", type=int, help="override train.steps")

    p_sample = sub.add_parser("sample", help="downscale a sequence into an ensemble")
    p_sample.add_argument("--checkpoint", type=Path, required=True)
    p_sample.add_argument("--out", type=Path, required=True)
    p_sample.add_argument("--input", type=Path, help="input .ofdf sequence (default: synthetic eval item)")
    p_sample.add_argument("--eval-index", type=int, default=0,
                          help="synthetic test-split sequence index when no --input")
    p_sample.add_argument("--members", type=int, help="override sample.members")
    p_sample.add_argument("--steps", type=int, help="override sample.steps")
    p_sample.add_argument("--seed", type=int, help="override sample.seed")

    p_eval = sub.add_parser("evaluate", help="score an ensemble against truth")
    p_eval.add_argument("--ensemble", type=Path, required=True, help="sample output directory")
    p_eval.add_argument("--truth", type=Path, help="truth .ofdf (default: ensemble dir truth)")
    p_eval.add_argument("--out", type=Path, required=True)

    p_plot = sub.add_parser("plot", help="render histograms, spectra, frame strips, time means")
    p_plot.add_argument("--ensemble", type=Path, action="append", default=[],
                        help="sample output directory (repeatable)")
    p_plot.add_argument("--truth", type=Path, help="truth .ofdf")
    p_plot.add_argument("--report", type=Path, help="evaluate output directory (for spectra)")
    p_plot.add_argument("--out", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=args.steps))
    ckpt = train_run(cfg, args.out, resume=args.resume)
    print(f"trained {cfg.train.steps} steps -> {ckpt}")
    return 0


def cmd_sample(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    cfg, pipe, ema = restore_model(payload)
    norm = NormSpec(**payload["norm"])
    members = args.members if args.members is not None else cfg.sample.members
    steps = args.steps if args.steps is not None else cfg.sample.steps
    seed = args.seed if args.seed is not None else cfg.sample.seed

    if args.input is not None:
        x_np, y_np, s = read_ofdf(args.input)
        if s != cfg.data.scale:
            raise DataError(
                f"{args.input}: sequence scale {s} != model scale {cfg.data.scale}"
            )
        source = str(args.input)
    else:
        spec = cfg.data.synthetic_spec(cfg.train.frames, cfg.train.seed)
        if cfg.ablation == "single_channel":
            spec = dataclasses.replace(spec, channels=1)
        dataset = SyntheticDataset(spec, split="test",
                                   n_sequences=max(cfg.data.n_eval, args.eval_index + 1),
                                   norm=norm)
        item = dataset[args.eval_index]
        x_np, y_np = item.x.numpy(), item.y.numpy()
        source = f"synthetic:test:{args.eval_index}"

    if x_np.shape[1] != pipe.model.in_channels:
        raise DataError(
            f"input has {x_np.shape[1]} channels but the checkpointed model expects "
            f"{pipe.model.in_channels}"
        )

    sample_pipe = Pipeline(ema.shadow_model(pipe.model), pipe.schedule,
                           mode=pipe.mode, loss_weights=pipe.loss_weights)
    x = torch.from_numpy(x_np)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ofdf(out_dir / "truth.ofdf", x_np, y_np)

    member_files, seeds = [], []
    for m in range(members):
        member_seed = seed * 100_003 + m
        gen = torch.Generator().manual_seed(member_seed)
        y_check = sample_pipe.sample_sequence(x, steps, gen)
        name = f"member_{m:03d}.ofdf"
        write_ofdf(out_dir / name, x_np, y_check.numpy().astype(np.float32))
        member_files.append(name)
        seeds.append(member_seed)

    manifest = {
        "format": "precipdiff-ensemble",
        "config_hash": payload["config_hash"],
        "source": source,
        "sampler_steps": steps,
        "members": members,
        "seeds": seeds,
        "norm": payload["norm"],
        "member_files": member_files,
        "truth_file": "truth.ofdf",
    }
    atomic_write_text(out_dir / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
    print(f"sampled {members} members x {steps} steps -> {out_dir}")
    return 0


def read_manifest(ensemble_dir: Path) -> dict:
    path = Path(ensemble_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no {MANIFEST_NAME} in {ensemble_dir}; not a sample output directory")
    return json.loads(path.read_text())


def load_ensemble(ensemble_dir: Path, truth_path: Path | None):
    """Denormalized (members, truth, norm, config_hash) from a sample directory."""
    ensemble_dir = Path(ensemble_dir)
    manifest = read_manifest(ensemble_dir)
    norm = NormSpec(**manifest["norm"])
    members = []
    for name in manifest["member_files"]:
        _, y, _ = read_ofdf(ensemble_dir / name)
        members.append(denormalize(y, norm))
    members = np.stack(members)
    if truth_path is None:
        truth_path = ensemble_dir / manifest["truth_file"]
    _, y_true, _ = read_ofdf(truth_path)
    truth = denormalize(y_true, norm)
    if truth.shape != members.shape[1:]:
        raise DataError(
            f"truth {truth_path} shape {truth.shape} does not match ensemble "
            f"member shape {members.shape[1:]}"
        )
    return members, truth, norm, manifest.get("config_hash", "")


def cmd_evaluate(args) -> int:
    members, truth, norm, cfg_hash = load_ensemble(args.ensemble, args.truth)
    report = compute_report(EnsembleForecast(members=members, truth=truth),
                            emd_floor=norm.epsilon)
    power2d_pred, _ = power_spectrum(members.reshape(-1, *members.shape[-2:]))
    power2d_truth, _ = power_spectrum(truth.reshape(-1, *truth.shape[-2:]))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in (
        ("spectrum_pred.npy", report.spectrum_pred),
        ("spectrum_truth.npy", report.spectrum_truth),
        ("power2d_pred.npy", power2d_pred),
        ("power2d_truth.npy", power2d_truth),
    ):
        tmp = out_dir / (name + ".tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, arr)
        tmp.replace(out_dir / name)

    doc = {
        "format": "precipdiff-report",
        "config_hash": cfg_hash,
        **report.scalars(),
        "norm": {"epsilon": norm.epsilon, "lo": norm.lo, "hi": norm.hi},
        "spectra_files": ["spectrum_pred.npy", "spectrum_truth.npy",
                          "power2d_pred.npy", "power2d_truth.npy"],
    }
    atomic_write_text(out_dir / "report.json", json.dumps(doc, indent=2, sort_keys=True))
    lines = [f"{k}={v!r}" for k, v in report.scalars().items()]
    lines += [f"norm.{k}={v!r}" for k, v in doc["norm"].items()]
    lines.append(f"config_hash={cfg_hash}")
    atomic_write_text(out_dir / "report.txt", "\n".join(lines) + "\n")
    summary = " ".join(f"{k}={v:.6g}" for k, v in report.scalars().items())
    print(f"evaluate: {summary}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import LogNorm

    if not args.ensemble and args.report is None:
        raise UsageError("plot needs at least one --ensemble or a --report directory")
    for path in [*args.ensemble, args.truth, args.report]:
        if path is not None and not Path(path).exists():
            raise DataError(f"plot input {path} does not exist")

    ensembles = []  # (label, members, truth, norm)
    for ens_dir in args.ensemble:
        members, truth, norm, _ = load_ensemble(ens_dir, args.truth)
        ensembles.append((Path(ens_dir).name, members, truth, norm))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if ensembles:
        truth = ensembles[0][2]
        floor = ensembles[0][3].epsilon
        top = max(truth.max(), max(m.max() for _, m, _, _ in ensembles), floor * 10)
        bins = np.geomspace(floor, top, 60)

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(truth.ravel() + floor, bins=bins, histtype="step", label="truth", density=True)
        for label, members, _, _ in ensembles:
            ax.hist(members.ravel() + floor, bins=bins, histtype="step", label=label,
                    density=True)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("precipitation intensity")
        ax.set_ylabel("density")
        ax.legend()
        fig.savefig(out_dir / "histogram.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append("histogram.png")

        # frame strip: rows are truth then one member per ensemble, columns are times
        n_frames = truth.shape[0]
        cols = min(6, n_frames)
        times = np.linspace(0, n_frames - 1, cols).astype(int)
        rows = [("truth", truth)] + [(label, members[0]) for label, members, _, _ in ensembles]
        fig, axes = plt.subplots(len(rows), cols, figsize=(2.2 * cols, 2.2 * len(rows)),
                                 squeeze=False)
        vmax = max(truth.max(), 1e-9)
        for r, (label, seq) in enumerate(rows):
            for c, t in enumerate(times):
                axes[r][c].imshow(seq[t, 0], vmin=0, vmax=vmax, cmap="viridis")
                axes[r][c].set_xticks([])
                axes[r][c].set_yticks([])
                if c == 0:
                    axes[r][c].set_ylabel(label, fontsize=8)
                if r == 0:
                    axes[r][c].set_title(f"t={t}", fontsize=8)
        fig.savefig(out_dir / "frames.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append("frames.png")

        fig, axes = plt.subplots(1, len(rows), figsize=(3.2 * len(rows), 3.2), squeeze=False)
        mean_max = max(truth.mean(axis=0)[0].max(), 1e-9)
        for c, (label, seq) in enumerate(rows):
            axes[0][c].imshow(seq.mean(axis=0)[0], vmin=0, vmax=mean_max, cmap="viridis")
            axes[0][c].set_title(f"{label} time mean", fontsize=9)
            axes[0][c].set_xticks([])
            axes[0][c].set_yticks([])
        fig.savefig(out_dir / "time_mean.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append("time_mean.png")

    if args.report is not None:
        report_dir = Path(args.report)
        radial_pred = np.load(report_dir / "spectrum_pred.npy")
        radial_truth = np.load(report_dir / "spectrum_truth.npy")
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(radial_truth, label="truth")
        ax.plot(radial_pred, label="prediction")
        ax.set_yscale("log")
        ax.set_xlabel("radial wavenumber")
        ax.set_ylabel("power")
        ax.legend()
        fig.savefig(out_dir / "spectra_radial.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append("spectra_radial.png")

        p_pred = np.fft.fftshift(np.load(report_dir / "power2d_pred.npy"))
        p_truth = np.fft.fftshift(np.load(report_dir / "power2d_truth.npy"))
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        vmin = max(min(p_pred.min(), p_truth.min()), 1e-12)
        vmax = max(p_pred.max(), p_truth.max())
        for ax, arr, title in zip(axes, (p_truth, p_pred), ("truth", "prediction")):
            ax.imshow(arr, norm=LogNorm(vmin=vmin, vmax=vmax))
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.savefig(out_dir / "spectra_2d.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append("spectra_2d.png")

    print(f"plot: wrote {', '.join(written)} in {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "train": cmd_train,
            "sample": cmd_sample,
            "evaluate": cmd_evaluate,
            "plot": cmd_plot,
        }[args.command]
        return handler(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
