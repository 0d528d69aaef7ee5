"""Synthetic paired-sequence generation, coarsening, normalization, and file I/O.

A desk-scale stand-in for paired climate-model output: high-resolution
precipitation-like fields are generated procedurally, block-mean coarsened
to form the low-resolution input, log-transformed, and normalized to
[-1, 1]. A simple binary container ("OFDF1") round-trips sequences to disk.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

OFDF_MAGIC = b"OFDF1"
OFDF_DTYPE_F32 = 1
_OFDF_HEADER = struct.Struct("<6I")  # T+1, C, H, W, s, dtype tag


@dataclass(frozen=True)
class NormSpec:
    """Log-transform epsilon and the affine map of log-space values to [-1, 1]."""

    epsilon: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon!r}")
        if not self.hi > self.lo:
            raise ConfigError(f"hi must exceed lo, got lo={self.lo!r}, hi={self.hi!r}")


@dataclass
class SequenceMeta:
    tile_id: int
    time_index: int
    norm: NormSpec


@dataclass
class PairedSequence:
    """Aligned low-res input frames and high-res target frames, normalized.

    ``x`` is [T+1, C, H, W]; ``y`` is [T+1, 1, sH, sW]; channel 0 of ``x`` is
    the coarsened precipitation field of ``y``.
    """

    x: torch.Tensor
    y: torch.Tensor
    meta: SequenceMeta

    @property
    def scale(self) -> int:
        return self.y.shape[-1] // self.x.shape[-1]


def coarsen(y_fine: np.ndarray, s: int) -> np.ndarray:
    """Non-overlapping s-by-s block means over the trailing two axes.

    Conservative: the global mean is preserved exactly (up to float
    summation error in the input dtype).
    """
    if s < 1 or not float(s).is_integer():
        raise ValueError(f"coarsening factor must be a positive integer, got {s!r}")
    h, w = y_fine.shape[-2], y_fine.shape[-1]
    if h % s or w % s:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by s={s}")
    shaped = y_fine.reshape(*y_fine.shape[:-2], h // s, s, w // s, s)
    return shaped.mean(axis=(-3, -1))


def normalize(raw: np.ndarray, spec: NormSpec) -> np.ndarray:
    """Log-transform nonnegative values and map them affinely into [-1, 1]."""
    raw = np.asarray(raw)
    if raw.size and raw.min() < 0:
        raise ValueError(f"normalize expects nonnegative input, min={raw.min()!r}")
    u = np.log(raw + spec.epsilon)
    out = 2.0 * (u - spec.lo) / (spec.hi - spec.lo) - 1.0
    return np.clip(out, -1.0, 1.0)


def denormalize(z: np.ndarray, spec: NormSpec) -> np.ndarray:
    """Inverse of :func:`normalize` for values whose log lies in [lo, hi]."""
    u = (np.asarray(z) + 1.0) / 2.0 * (spec.hi - spec.lo) + spec.lo
    return np.maximum(np.exp(u) - spec.epsilon, 0.0)


def fit_norm_spec(raw_samples: np.ndarray, epsilon: float = 1e-4, quantile: float = 0.9999) -> NormSpec:
    """Norm constants from a training pool: lo = log(eps), hi = a high log-quantile."""
    logs = np.log(np.asarray(raw_samples, dtype=np.float64).ravel() + epsilon)
    lo = math.log(epsilon)
    hi = float(np.quantile(logs, quantile))
    if hi <= lo:  # degenerate all-dry pool
        hi = lo + 1.0
    return NormSpec(epsilon=epsilon, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class MotionParams:
    """Shared drift of the synthetic storm field, in high-res pixels per frame.

    ``base_velocity`` pins the mean drift vector exactly; when None, a random
    direction at ``drift_speed`` is drawn per sequence. ``spatial_variation``
    modulates the drift smoothly across the domain; ``jitter`` is a per-cell
    random-walk perturbation.
    """

    base_velocity: tuple[float, float] | None = None
    drift_speed: float = 2.0
    spatial_variation: float = 0.2
    jitter: float = 0.1


@dataclass(frozen=True)
class CellParams:
    """Storm-cell population: count, shape, intensity, and terrain coupling."""

    n_cells: int = 30
    scale: float = 4.0          # mean gaussian axis length, px
    anisotropy: float = 2.5     # max ratio of major to minor axis
    intensity: float = 1.0      # mean of the exponential peak-intensity law
    orographic_amp: float = 1.5 # windward-flank multiplicative enhancement


@dataclass
class SyntheticSequence:
    precip: np.ndarray       # [T+1, 1, H, W], raw nonnegative intensities
    velocity: np.ndarray     # [2, H, W], px/frame, channel 0 horizontal
    topography: np.ndarray   # [H, W], in [0, 1]


def _ridge_topography(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth diagonal ridge with a randomized offset."""
    rows = np.arange(height, dtype=np.float64).reshape(-1, 1)
    cols = np.arange(width, dtype=np.float64).reshape(1, -1)
    theta = rng.uniform(0.3, 1.2)
    proj = (cols * math.cos(theta) + rows * math.sin(theta)) / max(height, width)
    center = rng.uniform(0.35, 0.65)
    ridge = np.exp(-(((proj - center) / 0.12) ** 2))
    return ridge


def generate_synthetic_sequence(
    rng: np.random.Generator,
    n_frames: int,
    height: int,
    width: int,
    motion: MotionParams = MotionParams(),
    cells: CellParams = CellParams(),
) -> SyntheticSequence:
    """Advecting anisotropic storm cells over static terrain.

    Produces ``n_frames + 1`` frames: a sum of gaussian cells with
    exponentially distributed peak intensities drifts with a smooth shared
    velocity field (plus per-cell jitter) on a periodic domain, and a static
    ridge multiplicatively enhances intensity on its windward flank.
    """
    topo = _ridge_topography(height, width, rng)

    if motion.base_velocity is not None:
        v0 = np.array(motion.base_velocity, dtype=np.float64)
    else:
        angle = rng.uniform(0, 2 * math.pi)
        v0 = motion.drift_speed * np.array([math.cos(angle), math.sin(angle)])

    rows = np.arange(height, dtype=np.float64).reshape(-1, 1)
    cols = np.arange(width, dtype=np.float64).reshape(1, -1)
    phase_r, phase_c = rng.uniform(0, 2 * math.pi, size=2)
    mod = motion.spatial_variation * (
        np.sin(2 * math.pi * rows / height + phase_r)
        + np.sin(2 * math.pi * cols / width + phase_c)
    ) / 2.0
    vel = np.stack([v0[0] * (1.0 + mod), v0[1] * (1.0 + mod)])  # [2, H, W]

    # Windward enhancement: slope facing against the mean drift gets wetter.
    grad_r, grad_c = np.gradient(topo)
    speed = float(np.hypot(*v0)) or 1.0
    windward = np.maximum(-(grad_c * v0[0] + grad_r * v0[1]) / speed, 0.0)
    peak = windward.max()
    if peak > 0:
        windward = windward / peak
    enhance = 1.0 + cells.orographic_amp * windward

    centers = rng.uniform([0, 0], [width, height], size=(cells.n_cells, 2))
    amps = rng.exponential(cells.intensity, size=cells.n_cells)
    thetas = rng.uniform(0, math.pi, size=cells.n_cells)
    minor = cells.scale * rng.uniform(0.6, 1.4, size=cells.n_cells)
    major = minor * rng.uniform(1.0, cells.anisotropy, size=cells.n_cells)

    frames = np.zeros((n_frames + 1, 1, height, width), dtype=np.float64)
    for t in range(n_frames + 1):
        acc = np.zeros((height, width), dtype=np.float64)
        for k in range(cells.n_cells):
            cx, cy = centers[k]
            dx = cols - cx
            dy = rows - cy
            # minimum-image displacement on a periodic domain
            dx = dx - width * np.round(dx / width)
            dy = dy - height * np.round(dy / height)
            ct, st = math.cos(thetas[k]), math.sin(thetas[k])
            u = dx * ct + dy * st
            v = -dx * st + dy * ct
            acc += amps[k] * np.exp(-0.5 * ((u / major[k]) ** 2 + (v / minor[k]) ** 2))
        frames[t, 0] = acc * enhance

        # advect cell centers by the local drift plus jitter
        ccol = np.clip(centers[:, 0].astype(int), 0, width - 1)
        crow = np.clip(centers[:, 1].astype(int), 0, height - 1)
        step = np.stack([vel[0, crow, ccol], vel[1, crow, ccol]], axis=1)
        if motion.jitter > 0:
            step = step + rng.normal(0.0, motion.jitter, size=step.shape)
        centers = (centers + step) % [width, height]

    return SyntheticSequence(precip=frames, velocity=vel, topography=topo)


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class SyntheticSpec:
    """Everything needed to regenerate a synthetic split deterministically."""

    n_frames: int = 8
    height: int = 48          # low-res
    width: int = 48
    scale: int = 8
    channels: int = 3         # precip + 2 velocity; 4 adds topography
    seed: int = 0
    epsilon: float = 1e-4
    motion: MotionParams = field(default_factory=MotionParams)
    cells: CellParams = field(default_factory=CellParams)

    def __post_init__(self):
        if self.channels not in (1, 3, 4):
            raise ConfigError(
                f"synthetic data supports 1, 3, or 4 channels, got {self.channels}"
            )


_TEST_SPLIT_OFFSET = 100_000
_CALIBRATION_SEQUENCES = 6


class SyntheticDataset:
    """Deterministic, index-addressable stream of normalized paired sequences.

    Item i of a split is a pure function of (spec.seed, split, i); train and
    test draw from disjoint seed ranges. Normalization constants are fitted
    once on a fixed calibration slice of the train split and shared by both
    splits.
    """

    def __init__(self, spec: SyntheticSpec, split: str = "train", n_sequences: int = 64,
                 norm: NormSpec | None = None):
        if split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
        self.spec = spec
        self.split = split
        self.n_sequences = n_sequences
        self.norm = norm if norm is not None else self._fit_norm()

    def _sequence_seed(self, index: int) -> int:
        offset = 0 if self.split == "train" else _TEST_SPLIT_OFFSET
        return offset + index

    def _raw(self, index: int) -> SyntheticSequence:
        rng = np.random.default_rng([self.spec.seed, self._sequence_seed(index)])
        sh = self.spec.height * self.spec.scale
        sw = self.spec.width * self.spec.scale
        return generate_synthetic_sequence(
            rng, self.spec.n_frames, sh, sw, self.spec.motion, self.spec.cells
        )

    def _fit_norm(self) -> NormSpec:
        rng = np.random.default_rng([self.spec.seed, 777])
        sh = self.spec.height * self.spec.scale
        sw = self.spec.width * self.spec.scale
        pools = [
            generate_synthetic_sequence(
                rng, self.spec.n_frames, sh, sw, self.spec.motion, self.spec.cells
            ).precip
            for _ in range(_CALIBRATION_SEQUENCES)
        ]
        return fit_norm_spec(np.concatenate(pools), epsilon=self.spec.epsilon)

    def __len__(self) -> int:
        return self.n_sequences

    def __getitem__(self, index: int) -> PairedSequence:
        if not 0 <= index < self.n_sequences:
            raise IndexError(index)
        seq = self._raw(index)
        spec = self.spec
        y_norm = normalize(seq.precip, self.norm)

        x_precip = normalize(coarsen(seq.precip, spec.scale), self.norm)
        channels = [x_precip]
        if spec.channels >= 3:
            vmax = spec.motion.drift_speed * (1.0 + spec.motion.spatial_variation) + 1.0
            vel_coarse = coarsen(seq.velocity, spec.scale) / vmax
            vel_coarse = np.clip(vel_coarse, -1.0, 1.0)
            per_frame = np.broadcast_to(
                vel_coarse, (spec.n_frames + 1, 2, spec.height, spec.width)
            )
            channels.append(per_frame)
        if spec.channels >= 4:
            topo = 2.0 * coarsen(seq.topography, spec.scale) - 1.0
            channels.append(
                np.broadcast_to(topo, (spec.n_frames + 1, 1, spec.height, spec.width))
            )
        x = np.concatenate(channels, axis=1)

        meta = SequenceMeta(tile_id=self._sequence_seed(index), time_index=0, norm=self.norm)
        return PairedSequence(
            x=torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)),
            y=torch.from_numpy(np.ascontiguousarray(y_norm, dtype=np.float32)),
            meta=meta,
        )


class FileDataset:
    """Paired sequences read from a directory of OFDF container files."""

    def __init__(self, directory: str | Path, norm: NormSpec):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DataError(f"data directory {self.directory} does not exist")
        self.paths = sorted(self.directory.glob("*.ofdf"))
        if not self.paths:
            raise DataError(f"no .ofdf files found in {self.directory}")
        self.norm = norm

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> PairedSequence:
        x, y, _ = read_ofdf(self.paths[index])
        meta = SequenceMeta(tile_id=index, time_index=0, norm=self.norm)
        return PairedSequence(x=torch.from_numpy(x), y=torch.from_numpy(y), meta=meta)


def build_dataset(spec: SyntheticSpec, split: str = "train", n_sequences: int = 64,
                  ingest_dir: str | Path | None = None,
                  norm: NormSpec | None = None):
    """Synthetic dataset by default; file ingestion when a directory is named."""
    if ingest_dir is not None:
        if norm is None:
            raise ConfigError("file ingestion requires explicit normalization constants")
        return FileDataset(ingest_dir, norm)
    return SyntheticDataset(spec, split=split, n_sequences=n_sequences, norm=norm)


# ---------------------------------------------------------------------------
# OFDF container format
#
# Byte layout (little endian):
#   magic   5 bytes   b"OFDF1"
#   header  6 uint32  T+1, C, H, W, s, dtype tag (1 = float32)
#   x       (T+1)*C*H*W float32, row-major
#   y       (T+1)*1*(s*H)*(s*W) float32, row-major


def write_ofdf(path: str | Path, x: np.ndarray, y: np.ndarray) -> None:
    """Write one paired sequence; shapes [T+1, C, H, W] and [T+1, 1, sH, sW]."""
    x = np.asarray(x, dtype="<f4")
    y = np.asarray(y, dtype="<f4")
    if x.ndim != 4 or y.ndim != 4 or y.shape[1] != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad sequence shapes x={x.shape}, y={y.shape}")
    t1, c, h, w = x.shape
    if y.shape[2] % h or y.shape[3] % w or y.shape[2] // h != y.shape[3] // w:
        raise ValueError(f"y dims {y.shape} are not an integer multiple of x dims {x.shape}")
    s = y.shape[2] // h
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(OFDF_MAGIC)
        fh.write(_OFDF_HEADER.pack(t1, c, h, w, s, OFDF_DTYPE_F32))
        fh.write(np.ascontiguousarray(x).tobytes())
        fh.write(np.ascontiguousarray(y).tobytes())
    tmp.replace(path)


def read_ofdf(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read one paired sequence; returns (x, y, s)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    head = len(OFDF_MAGIC) + _OFDF_HEADER.size
    if len(blob) < head or blob[: len(OFDF_MAGIC)] != OFDF_MAGIC:
        raise DataError(
            f"{path} is not an OFDF file (expected magic {OFDF_MAGIC!r} followed by "
            "six uint32 header fields)"
        )
    t1, c, h, w, s, tag = _OFDF_HEADER.unpack_from(blob, len(OFDF_MAGIC))
    if tag != OFDF_DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype tag {tag} (only {OFDF_DTYPE_F32}=float32)")
    nx = t1 * c * h * w
    ny = t1 * 1 * (s * h) * (s * w)
    expected = head + 4 * (nx + ny)
    if len(blob) != expected:
        raise DataError(
            f"{path}: payload size {len(blob)} != expected {expected} for dims "
            f"T+1={t1}, C={c}, H={h}, W={w}, s={s}"
        )
    x = np.frombuffer(blob, dtype="<f4", count=nx, offset=head).reshape(t1, c, h, w).copy()
    y = (
        np.frombuffer(blob, dtype="<f4", count=ny, offset=head + 4 * nx)
        .reshape(t1, 1, s * h, s * w)
        .copy()
    )
    return x, y, s
