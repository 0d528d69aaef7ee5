"""Orchestration of the downscaling pipeline: deterministic prediction
assembly, teacher-forced training steps, accelerated residual sampling, and
the ablation switches.

Each frame t >= 2 is produced from the low-res window x[t-2 : t] alone:
the two context frames are deterministically downscaled, the current frame
is bicubically upsampled, a learned flow warps the previous estimate into a
motion-compensated prediction, and a conditional diffusion model supplies
the residual on top of it. Frames 0 and 1 use the downscaler alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import PairedSequence
from .errors import ConfigError, NumericsError
from .nets import DownscalingModel, bicubic_upsample
from .schedule import DiffusionSchedule, ddim_subsequence
from .warp import bilinear_warp

ABLATION_MODES = ("full", "no_flow", "single_channel")


@dataclass
class StepOutputs:
    """Intermediate and final frames of one pipeline step."""

    y_hat_tm1: torch.Tensor
    y_hat_tm2: torch.Tensor
    y_bar_t: torch.Tensor
    y_tilde_t: torch.Tensor
    r0_t: torch.Tensor | None = None
    y_check_t: torch.Tensor | None = None


@dataclass
class LossBreakdown:
    """Weighted loss terms; total is their plain sum."""

    l_diff: float
    l_flow: float
    l_swin: float

    @property
    def total(self) -> float:
        return self.l_diff + self.l_flow + self.l_swin


def set_ablation(config, mode: str):
    """Validated copy of a run config switched to the given pipeline variant."""
    import dataclasses

    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    return dataclasses.replace(config, ablation=mode)


class Pipeline:
    """Binds a model, a schedule, and an ablation mode into the full pipeline."""

    def __init__(self, model: DownscalingModel, schedule: DiffusionSchedule,
                 mode: str = "full", loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)):
        if mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
        if mode == "no_flow" and model.use_flow:
            raise ConfigError("no_flow pipeline requires a model built without a flow net")
        if mode != "no_flow" and not model.use_flow:
            raise ConfigError(f"mode {mode!r} requires a flow-bearing model")
        if mode == "single_channel" and model.in_channels != 1:
            raise ConfigError("single_channel pipeline requires a 1-channel model")
        self.model = model
        self.schedule = schedule
        self.mode = mode
        self.loss_weights = tuple(float(w) for w in loss_weights)

    @property
    def scale(self) -> int:
        return self.model.scale

    def _aux_channels(self, x_t: torch.Tensor) -> torch.Tensor | None:
        if self.model.in_channels <= 1:
            return None
        return bicubic_upsample(x_t[1:], self.scale)

    def deterministic_prediction(self, x_ctx: torch.Tensor):
        """Assemble the motion-compensated prediction for one frame.

        ``x_ctx`` holds the three low-res frames [3, C, H, W] ending at the
        current one. Returns (StepOutputs, flow_features); the features are
        None in the no-flow variant.
        """
        if x_ctx.ndim != 4 or x_ctx.shape[0] != 3:
            raise ValueError(
                f"expected three stacked low-res frames [3, C, H, W], got {tuple(x_ctx.shape)}"
            )
        model = self.model
        y_hat_tm2 = model.downscale_frame(x_ctx[0])
        y_hat_tm1 = model.downscale_frame(x_ctx[1])
        y_bar_t = bicubic_upsample(x_ctx[2, :1], self.scale)
        if self.mode == "no_flow":
            y_tilde_t = model.downscale_frame(x_ctx[2])
            features = None
        else:
            flow, features = model.predict_flow(y_bar_t, y_hat_tm1, y_hat_tm2)
            y_tilde_t = bilinear_warp(y_hat_tm1, flow)
        ctx = StepOutputs(
            y_hat_tm1=y_hat_tm1, y_hat_tm2=y_hat_tm2, y_bar_t=y_bar_t, y_tilde_t=y_tilde_t
        )
        return ctx, features

    def first_frames_prediction(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        """Downscaler-only prediction for the sequence-initial frames t < 2."""
        if t >= 2:
            raise ValueError(f"first-frame prediction only applies to t < 2, got t={t}")
        return self.model.downscale_frame(x_t)

    def training_step(self, batch: PairedSequence, generator: torch.Generator) -> LossBreakdown:
        """One teacher-forced pass over a sequence; backpropagates the total loss.

        A single noise level is drawn per sequence and shared across frames.
        The diffusion term regresses the angular target, the flow term pulls
        the warped prediction toward the truth, and the restoration term
        pulls every context downscaling toward its own truth frame. Gradients
        accumulate on all three parameter sets jointly.
        """
        x, y = batch.x, batch.y
        t_last = x.shape[0] - 1
        if t_last < 2:
            raise ValueError(f"training sequences need T >= 2, got T={t_last}")
        schedule = self.schedule
        n = int(torch.randint(0, schedule.n_steps + 1, (1,), generator=generator).item())

        l_diff = x.new_zeros(())
        l_flow = x.new_zeros(())
        l_swin = x.new_zeros(())
        for t in range(2, t_last + 1):
            ctx, features = self.deterministic_prediction(x[t - 2 : t + 1])
            r0 = y[t] - ctx.y_tilde_t
            eps = torch.empty_like(r0).normal_(generator=generator)
            r_n = schedule.forward_marginal_sample(r0, n, eps)
            v = schedule.v_target(r0, eps, n)
            v_hat = self.model.denoise(
                r_n, n, ctx.y_bar_t, ctx.y_tilde_t,
                flow_features=features, aux=self._aux_channels(x[t]),
            )
            l_diff = l_diff + ((v_hat - v) ** 2).mean()
            l_flow = l_flow + ((ctx.y_tilde_t - y[t]) ** 2).mean()
            l_swin = l_swin + ((ctx.y_hat_tm2 - y[t - 2]) ** 2).mean()
            l_swin = l_swin + ((ctx.y_hat_tm1 - y[t - 1]) ** 2).mean()

        for name, term in (("l_diff", l_diff), ("l_flow", l_flow), ("l_swin", l_swin)):
            if not torch.isfinite(term):
                raise NumericsError(f"loss term {name} is non-finite at noise level n={n}")

        w_diff, w_flow, w_swin = self.loss_weights
        total = w_diff * l_diff + w_flow * l_flow + w_swin * l_swin
        if total.requires_grad:
            total.backward()
        return LossBreakdown(
            l_diff=float(w_diff * l_diff.detach()),
            l_flow=float(w_flow * l_flow.detach()),
            l_swin=float(w_swin * l_swin.detach()),
        )

    @torch.no_grad()
    def sample_sequence(self, x: torch.Tensor, sampler_steps: int,
                        generator: torch.Generator, return_details: bool = False):
        """Stochastically downscale a whole low-res sequence [T+1, C, H, W].

        Frames 0 and 1 come from the downscaler alone. Every later frame runs
        the deterministic prediction and then integrates the residual down an
        equally spaced, strictly deterministic step subsequence; stochasticity
        enters only through the initial Gaussian residual draw.
        ``return_details`` additionally yields the per-frame StepOutputs for
        frames t >= 2.
        """
        schedule = self.schedule
        taus = ddim_subsequence(schedule.n_steps, sampler_steps)
        t_last = x.shape[0] - 1
        frames = []
        details = []
        for t in range(min(2, t_last + 1)):
            frames.append(self.first_frames_prediction(x[t], t))
        for t in range(2, t_last + 1):
            ctx, features = self.deterministic_prediction(x[t - 2 : t + 1])
            aux = self._aux_channels(x[t])
            r = torch.empty_like(ctx.y_tilde_t).normal_(generator=generator)
            prevs = [0] + taus[:-1]
            for n, prev in zip(reversed(taus), reversed(prevs)):
                v_hat = self.model.denoise(
                    r, n, ctx.y_bar_t, ctx.y_tilde_t, flow_features=features, aux=aux
                )
                r0_hat, eps_hat = schedule.invert_v(r, v_hat, n)
                r = float(schedule.alpha[prev]) * r0_hat + float(schedule.sigma[prev]) * eps_hat
            ctx.r0_t = r
            ctx.y_check_t = ctx.y_tilde_t + r
            frames.append(ctx.y_check_t)
            details.append(ctx)
        out = torch.stack(frames)
        if not torch.isfinite(out).all():
            raise NumericsError("sampled sequence contains non-finite values")
        return (out, details) if return_details else out
