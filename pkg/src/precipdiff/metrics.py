"""Evaluation suite: CRPS, MSE, histogram earth-mover distance, extreme
percentile error, and FFT power spectra.

All metrics operate on denormalized (physical) values; normalization must
not leak into reported numbers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class EnsembleForecast:
    """M stochastic downscaled sequences plus the matching truth.

    ``members`` is [M, T+1, 1, H, W]; ``truth`` is [T+1, 1, H, W]; values are
    physical (nonnegative) precipitation intensities.
    """

    members: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.members = np.asarray(self.members)
        self.truth = np.asarray(self.truth)
        if self.members.ndim != self.truth.ndim + 1 or self.members.shape[1:] != self.truth.shape:
            raise ValueError(
                f"members shape {self.members.shape} does not extend truth shape "
                f"{self.truth.shape} by a leading ensemble axis"
            )
        if self.members.shape[0] < 1:
            raise ValueError("ensemble needs at least one member")
        if self.members.min() < 0 or self.truth.min() < 0:
            raise ValueError("ensemble values must be nonnegative physical intensities")


def crps(ensemble: EnsembleForecast, fair: bool = False) -> float:
    """Mean continuous ranked probability score over all pixels and times.

    Per point: ``(1/M) sum_i |z_i - y| - (1/(2 M^2)) sum_{ij} |z_i - z_j|``.
    ``fair=True`` uses the 1/(2 M (M-1)) spread normalization instead. For
    M = 1 the score reduces to the mean absolute error.
    """
    z = np.sort(ensemble.members, axis=0)
    m = z.shape[0]
    if fair and m < 2:
        raise ValueError("fair CRPS needs at least two members")
    term1 = np.abs(z - ensemble.truth[None]).mean(axis=0)
    # sum_{i,j} |z_i - z_j| = 2 * sum_k (2k - M + 1) z_(k) over sorted members
    k = np.arange(m, dtype=np.float64).reshape((m,) + (1,) * ensemble.truth.ndim)
    pair_sum = 2.0 * ((2.0 * k - m + 1.0) * z).sum(axis=0)
    denom = 2.0 * m * (m - 1) if fair else 2.0 * m * m
    return float((term1 - pair_sum / denom).mean())


def mse(prediction: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared difference; for ensembles, pass the ensemble mean."""
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {truth.shape}")
    return float(np.mean((prediction.astype(np.float64) - truth.astype(np.float64)) ** 2))


def emd(pred_values: np.ndarray, true_values: np.ndarray, *,
        n_bins: int = 256, floor: float = 1e-4) -> float:
    """Wasserstein-1 between pooled value distributions on a fixed log binning.

    Integrates |CDF_pred - CDF_true| over ``n_bins`` log-spaced bins spanning
    [floor, max]; values below the floor (dry pixels) count as mass at the
    lowest edge.
    """
    pred = np.sort(np.asarray(pred_values, dtype=np.float64).ravel())
    true = np.sort(np.asarray(true_values, dtype=np.float64).ravel())
    if pred.size == 0 or true.size == 0:
        raise ValueError("emd requires non-empty value pools")
    hi = max(pred[-1], true[-1])
    if hi <= floor:
        return 0.0
    edges = np.geomspace(floor, hi, n_bins + 1)
    cdf_pred = np.searchsorted(pred, edges, side="right") / pred.size
    cdf_true = np.searchsorted(true, edges, side="right") / true.size
    gap = np.abs(cdf_pred - cdf_true)
    return float(np.sum(0.5 * (gap[:-1] + gap[1:]) * np.diff(edges)))


def percentile_error(pred_values: np.ndarray, true_values: np.ndarray,
                     q: float = 0.99999) -> float:
    """Absolute error of the q-quantile between pooled value sets."""
    pred = np.asarray(pred_values, dtype=np.float64).ravel()
    true = np.asarray(true_values, dtype=np.float64).ravel()
    if pred.size == 0 or true.size == 0:
        raise ValueError("percentile_error requires non-empty value pools")
    needed = 1.0 / (1.0 - q) if q < 1 else np.inf
    if min(pred.size, true.size) < needed:
        warnings.warn(
            f"pool size {min(pred.size, true.size)} is too small for an interior "
            f"{q} quantile (needs ~{needed:.0f} samples)",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(abs(np.quantile(pred, q) - np.quantile(true, q)))


def power_spectrum(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean 2-D FFT power of a frame set plus its radially averaged profile.

    ``frames`` is [..., H, W]; leading axes are flattened into the averaging
    set. Power is the squared magnitude of the unnormalized FFT. The radial
    profile averages over integer-radius annuli in wavenumber space, indexed
    0 (DC) through min(H, W) // 2.
    """
    frames = np.asarray(frames, dtype=np.float64)
    h, w = frames.shape[-2], frames.shape[-1]
    flat = frames.reshape(-1, h, w)
    power = np.abs(np.fft.fft2(flat)) ** 2
    power2d = power.mean(axis=0)

    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    radius = np.rint(np.hypot(fy[:, None], fx[None, :])).astype(np.int64)
    r_max = min(h, w) // 2
    keep = radius <= r_max
    sums = np.bincount(radius[keep], weights=power2d[keep], minlength=r_max + 1)
    counts = np.bincount(radius[keep], minlength=r_max + 1)
    profile = sums / counts
    return power2d, profile


@dataclass
class MetricsReport:
    """The four scalar scores plus radial spectra for prediction and truth."""

    crps: float
    mse: float
    emd: float
    pe: float
    spectrum_pred: np.ndarray
    spectrum_truth: np.ndarray

    def __post_init__(self):
        for name in ("crps", "mse", "emd", "pe"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"metric {name} is not finite")

    def scalars(self) -> dict[str, float]:
        return {"crps": self.crps, "mse": self.mse, "emd": self.emd, "pe": self.pe}


def compute_report(ensemble: EnsembleForecast, *, emd_floor: float = 1e-4) -> MetricsReport:
    """Full metric suite for one ensemble: scalars plus radial spectra."""
    members = ensemble.members
    truth = ensemble.truth
    _, spec_pred = power_spectrum(members.reshape(-1, *members.shape[-2:]))
    _, spec_truth = power_spectrum(truth.reshape(-1, *truth.shape[-2:]))
    return MetricsReport(
        crps=crps(ensemble),
        mse=mse(members.mean(axis=0), truth),
        emd=emd(members, truth, floor=emd_floor),
        pe=percentile_error(members, truth),
        spectrum_pred=spec_pred,
        spectrum_truth=spec_truth,
    )
