"""Variance schedules and the closed-form diffusion quantities built on them.

The schedule owns all noise-level math: forward marginals, the angular
("v") regression target, its inversion back to (clean, noise) estimates,
and the accelerated-sampler step subsequence. Coefficient arrays are
precomputed once in float64; cumulative products at depth ~1400 lose too
much precision in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable variance schedule with derived signal/noise coefficients.

    ``alpha[n]**2 = prod_{i<=n}(1 - beta[i])`` with ``alpha[0] = 1`` (empty
    product), and ``sigma[n]**2 = 1 - alpha[n]**2``. ``beta`` has length
    ``n_steps``; ``alpha`` and ``sigma`` have length ``n_steps + 1`` so they
    are indexable by the step index n in [0, n_steps].
    """

    n_steps: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def _check_step(self, n: int, lowest: int = 0) -> None:
        if not isinstance(n, (int, np.integer)):
            raise ValueError(f"step index must be an integer, got {type(n).__name__}")
        if not lowest <= n <= self.n_steps:
            raise ValueError(
                f"step index {n} outside [{lowest}, {self.n_steps}]"
            )

    def forward_marginal_sample(self, r0, n: int, eps):
        """Noisy residual at level n: ``alpha[n] * r0 + sigma[n] * eps``."""
        self._check_step(n)
        if getattr(r0, "shape", None) != getattr(eps, "shape", None):
            raise ValueError(
                f"r0 shape {getattr(r0, 'shape', None)} != eps shape "
                f"{getattr(eps, 'shape', None)}"
            )
        return float(self.alpha[n]) * r0 + float(self.sigma[n]) * eps

    def v_target(self, r0, eps, n: int):
        """Angular regression target ``alpha[n] * eps - sigma[n] * r0``."""
        self._check_step(n)
        if getattr(r0, "shape", None) != getattr(eps, "shape", None):
            raise ValueError(
                f"r0 shape {getattr(r0, 'shape', None)} != eps shape "
                f"{getattr(eps, 'shape', None)}"
            )
        return float(self.alpha[n]) * eps - float(self.sigma[n]) * r0

    def invert_v(self, r_n, v_hat, n: int):
        """Recover (clean, noise) estimates from a noisy residual and a v prediction.

        Returns ``(r0_hat, eps_hat)`` with ``r0_hat = alpha[n]*r_n - sigma[n]*v_hat``
        and ``eps_hat = sigma[n]*r_n + alpha[n]*v_hat``, which reconstruct
        ``r_n = alpha[n]*r0_hat + sigma[n]*eps_hat`` identically. Step 0 has
        nothing to invert and is rejected.
        """
        self._check_step(n, lowest=1)
        a, s = float(self.alpha[n]), float(self.sigma[n])
        r0_hat = a * r_n - s * v_hat
        eps_hat = s * r_n + a * v_hat
        return r0_hat, eps_hat


def build_schedule(
    n_steps: int,
    kind: str = "cosine",
    *,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    cosine_offset: float = 0.008,
) -> DiffusionSchedule:
    """Construct a variance schedule of ``n_steps`` levels.

    ``kind="linear"`` spaces beta evenly between ``beta_start`` and
    ``beta_end``; ``kind="cosine"`` uses the squared-cosine cumulative-signal
    profile with betas clamped into (0, 0.999] so the terminal signal level
    stays near zero without a degenerate final step.
    """
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise ConfigError(f"n_steps must be a positive integer, got {n_steps!r}")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError(
                "linear schedule requires 0 < beta_start <= beta_end < 1, got "
                f"beta_start={beta_start!r}, beta_end={beta_end!r}"
            )
        beta = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    elif kind == "cosine":
        grid = np.arange(n_steps + 1, dtype=np.float64) / n_steps
        f = np.cos((grid + cosine_offset) / (1.0 + cosine_offset) * math.pi / 2.0) ** 2
        alpha_sq = f / f[0]
        beta = 1.0 - alpha_sq[1:] / alpha_sq[:-1]
        beta = np.clip(beta, 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")

    alpha = np.sqrt(np.concatenate(([1.0], np.cumprod(1.0 - beta))))
    sigma = np.sqrt(1.0 - alpha**2)
    return DiffusionSchedule(n_steps=int(n_steps), kind=kind, beta=beta, alpha=alpha, sigma=sigma)


def ddim_subsequence(n_total: int, n_sampler: int) -> list[int]:
    """Equally spaced increasing step indices for accelerated sampling.

    Returns ``tau_i = round(i * n_total / n_sampler)`` for i = 1..n_sampler,
    with round-half-up so the indices are strictly increasing and end at
    ``n_total`` for every valid pair.
    """
    if not isinstance(n_total, (int, np.integer)) or n_total < 1:
        raise ValueError(f"n_total must be a positive integer, got {n_total!r}")
    if not isinstance(n_sampler, (int, np.integer)) or not 1 <= n_sampler <= n_total:
        raise ValueError(
            f"n_sampler must satisfy 1 <= n_sampler <= n_total={n_total}, got {n_sampler!r}"
        )
    # floor(i*N/S + 1/2) in exact integer arithmetic
    return [(2 * i * n_total + n_sampler) // (2 * n_sampler) for i in range(1, n_sampler + 1)]
