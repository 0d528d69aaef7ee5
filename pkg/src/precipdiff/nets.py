"""Parametric networks: per-frame deterministic downscaler, flow-predicting
U-Net, and the residual denoiser U-Net, plus the fixed bicubic upsampler and
the EMA parameter shadow.

The flow net and denoiser are twin U-Nets: two residual blocks per level
(the second followed by linear attention), convolutional down/upsampling by
two, and skip connections between matching blocks. The denoiser is
additionally conditioned on the denoising step through a random-Fourier
embedding added at every residual block, and on the flow net's
per-level feature maps concatenated into its downsampling blocks.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class ArchConfig:
    channel_dim: int = 64
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2, 3, 4)
    attention_heads: int = 4
    head_dim: int = 32
    fourier_dim: int = 32
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        for name in ("channel_dim", "attention_heads", "head_dim", "fourier_dim", "groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"arch.{name} must be a positive integer, got {value!r}")
        if len(self.channel_multipliers) < 2:
            raise ConfigError(
                f"arch.channel_multipliers needs at least two levels, got "
                f"{self.channel_multipliers!r}"
            )
        if any(not isinstance(m, int) or m < 1 for m in self.channel_multipliers):
            raise ConfigError(
                f"arch.channel_multipliers must be positive integers, got "
                f"{self.channel_multipliers!r}"
            )
        if self.channel_dim % self.groups:
            raise ConfigError(
                f"arch.channel_dim={self.channel_dim} must be divisible by "
                f"arch.groups={self.groups}"
            )
        if self.fourier_dim % 2:
            raise ConfigError(f"arch.fourier_dim must be even, got {self.fourier_dim}")

    @property
    def level_dims(self) -> tuple[int, ...]:
        return tuple(self.channel_dim * m for m in self.channel_multipliers)


def zero_init(conv: nn.Module) -> nn.Module:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def bicubic_upsample(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Fixed separable bicubic upsampling by an integer factor.

    Accepts [C, H, W] or [B, C, H, W]; constant fields map to the same
    constant, and scale 1 is the identity.
    """
    if not isinstance(scale, int) or scale < 1:
        raise ValueError(f"scale must be a positive integer, got {scale!r}")
    if scale == 1:
        return x
    if x.ndim == 3:
        return bicubic_upsample(x.unsqueeze(0), scale).squeeze(0)
    if x.ndim != 4:
        raise ValueError(f"expected [C, H, W] or [B, C, H, W], got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False)


class WSConv2d(nn.Conv2d):
    """3x3 convolution with weight standardization."""

    def forward(self, x):
        w = self.weight
        mean = w.mean(dim=(1, 2, 3), keepdim=True)
        var = w.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
        return self._conv_forward(x, (w - mean) / torch.sqrt(var + 1e-5), self.bias)


class StepEmbedding(nn.Module):
    """Random Fourier features of the normalized step, expanded by an MLP.

    Frequencies are drawn once at init and frozen.
    """

    def __init__(self, fourier_dim: int, out_dim: int):
        super().__init__()
        self.register_buffer("freqs", torch.randn(fourier_dim // 2))
        self.net = nn.Sequential(
            nn.Linear(fourier_dim, out_dim), nn.GELU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        ang = 2.0 * math.pi * u * self.freqs
        return self.net(torch.cat([ang.sin(), ang.cos()], dim=-1))


class ResBlock(nn.Module):
    """Two weight-standardized conv blocks (group norm, SiLU) with a 1x1 skip."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, emb_dim: int | None = None):
        super().__init__()
        self.conv1 = WSConv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, out_ch)
        self.conv2 = WSConv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.emb_proj = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb=None):
        h = F.silu(self.norm1(self.conv1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(F.silu(emb)).view(1, -1, 1, 1)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class LinearAttention(nn.Module):
    """Pre-normed linear attention with a residual connection."""

    def __init__(self, dim: int, heads: int, dim_head: int, groups: int):
        super().__init__()
        self.heads = heads
        self.dim_head = dim_head
        self.scale = dim_head**-0.5
        hidden = heads * dim_head
        self.norm = nn.GroupNorm(groups, dim)
        self.to_qkv = nn.Conv2d(dim, hidden * 3, 1, bias=False)
        self.to_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        b, _, h, w = x.shape
        qkv = self.to_qkv(self.norm(x)).chunk(3, dim=1)
        q, k, v = (t.view(b, self.heads, self.dim_head, h * w) for t in qkv)
        q = q.softmax(dim=-2) * self.scale
        k = k.softmax(dim=-1)
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q)
        return x + self.to_out(out.reshape(b, -1, h, w))


class CondUNet(nn.Module):
    """U-Net with optional step embedding and per-level conditioning features.

    ``feature_channels[i]`` extra channels are concatenated onto the input of
    both residual blocks of downsampling level i. Forward returns the output
    map and the per-level pairs of downsampling feature maps (which is how
    the flow net exposes its features to the denoiser).
    """

    def __init__(self, in_ch: int, out_ch: int, arch: ArchConfig, *,
                 step_embedding: bool = False,
                 feature_channels: tuple[int, ...] | None = None):
        super().__init__()
        dims = arch.level_dims
        levels = len(dims)
        fc = tuple(feature_channels) if feature_channels is not None else (0,) * levels
        if len(fc) != levels:
            raise ConfigError(
                f"feature_channels must have one entry per level ({levels}), got {len(fc)}"
            )
        self.feature_channels = fc
        self.levels = levels

        emb_dim = arch.channel_dim * 4 if step_embedding else None
        self.step_embedding = StepEmbedding(arch.fourier_dim, emb_dim) if step_embedding else None

        def block(i, o):
            return ResBlock(i, o, arch.groups, emb_dim)

        def attention(dim):
            return LinearAttention(dim, arch.attention_heads, arch.head_dim, arch.groups)

        self.stem = nn.Conv2d(in_ch, dims[0], 3, padding=1)

        self.down_blocks1 = nn.ModuleList()
        self.down_blocks2 = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, dim in enumerate(dims):
            self.down_blocks1.append(block(dim + fc[i], dim))
            self.down_blocks2.append(block(dim + fc[i], dim))
            self.down_attns.append(attention(dim))
            if i < levels - 1:
                self.downsamples.append(nn.Conv2d(dim, dims[i + 1], 3, stride=2, padding=1))

        self.mid_block1 = block(dims[-1], dims[-1])
        self.mid_attn = attention(dims[-1])
        self.mid_block2 = block(dims[-1], dims[-1])

        self.up_blocks1 = nn.ModuleList()
        self.up_blocks2 = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            dim = dims[i]
            self.up_blocks1.append(block(dim + dim, dim))
            self.up_blocks2.append(block(dim + dim, dim))
            self.up_attns.append(attention(dim))
            if i > 0:
                self.upsamples.append(
                    nn.ConvTranspose2d(dim, dims[i - 1], 3, stride=2, padding=1, output_padding=1)
                )

        self.head = zero_init(nn.Conv2d(dims[0], out_ch, 3, padding=1))

    def forward(self, x, step=None, features=None):
        height, width = x.shape[-2], x.shape[-1]
        stride = 2 ** (self.levels - 1)
        if height % stride or width % stride:
            raise ValueError(
                f"spatial dims ({height}, {width}) must be divisible by {stride} for "
                f"{self.levels} levels"
            )
        if any(self.feature_channels) and features is None:
            raise ConfigError("this network was built with per-level conditioning "
                              "features; none were provided")
        emb = None
        if self.step_embedding is not None:
            if step is None:
                raise ValueError("step value required for a step-embedded network")
            u = torch.as_tensor(step, dtype=x.dtype, device=x.device)
            emb = self.step_embedding(u)

        h = self.stem(x)
        skips = []
        down_features = []
        for i in range(self.levels):
            cond = features[i] if self.feature_channels[i] else None
            if cond is not None:
                h = torch.cat([h, cond[0]], dim=1)
            f1 = self.down_blocks1[i](h, emb)
            h = f1
            if cond is not None:
                h = torch.cat([h, cond[1]], dim=1)
            f2 = self.down_attns[i](self.down_blocks2[i](h, emb))
            h = f2
            skips.append((f1, f2))
            down_features.append((f1, f2))
            if i < self.levels - 1:
                h = self.downsamples[i](h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, emb)), emb)

        for j, i in enumerate(reversed(range(self.levels))):
            f1, f2 = skips[i]
            h = self.up_blocks1[j](torch.cat([h, f2], dim=1), emb)
            h = self.up_attns[j](self.up_blocks2[j](torch.cat([h, f1], dim=1), emb))
            if i > 0:
                h = self.upsamples[j](h)

        return self.head(h), down_features


class DownscalerNet(nn.Module):
    """Per-frame deterministic super-resolver.

    A residual trunk of weight-standardized conv blocks with interleaved
    linear attention, followed by a sub-pixel (channel rearrangement)
    upsampling head applied on top of a bicubic base. The head is
    zero-initialized, so the initial output is exactly the bicubic
    upsampling of the precipitation channel.
    """

    N_BLOCKS = 4

    def __init__(self, in_ch: int, scale: int, arch: ArchConfig):
        super().__init__()
        self.in_ch = in_ch
        self.scale = scale
        dim = arch.channel_dim
        self.stem = nn.Conv2d(in_ch, dim, 3, padding=1)
        self.blocks = nn.ModuleList(
            ResBlock(dim, dim, arch.groups) for _ in range(self.N_BLOCKS)
        )
        self.attns = nn.ModuleList(
            LinearAttention(dim, arch.attention_heads, arch.head_dim, arch.groups)
            if i % 2 == 1 else nn.Identity()
            for i in range(self.N_BLOCKS)
        )
        self.head = zero_init(nn.Conv2d(dim, scale * scale, 3, padding=1))

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ValueError(
                f"downscaler built for {self.in_ch} input channels, got {x.shape[1]}"
            )
        base = bicubic_upsample(x[:, :1], self.scale)
        h = self.stem(x)
        for blk, attn in zip(self.blocks, self.attns):
            h = attn(blk(h))
        detail = F.pixel_shuffle(self.head(h), self.scale)
        return base + detail


class DownscalingModel(nn.Module):
    """The jointly trained parameter sets behind the downscaling pipeline.

    Holds the deterministic downscaler, the (optional) flow-predicting
    U-Net, and the residual denoiser. Per-frame convenience methods accept
    unbatched [C, H, W] tensors.
    """

    def __init__(self, arch: ArchConfig, in_channels: int, scale: int, n_steps: int,
                 use_flow: bool = True):
        super().__init__()
        if in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {in_channels}")
        self.arch = arch
        self.in_channels = in_channels
        self.scale = scale
        self.n_steps = n_steps
        self.use_flow = use_flow

        self.downscaler = DownscalerNet(in_channels, scale, arch)
        self.flow_net = CondUNet(3, 2, arch) if use_flow else None
        aux = in_channels - 1
        self.denoiser = CondUNet(
            3 + aux, 1, arch,
            step_embedding=True,
            feature_channels=arch.level_dims if use_flow else None,
        )

    def arch_fingerprint(self) -> dict:
        return {
            "channel_dim": self.arch.channel_dim,
            "channel_multipliers": list(self.arch.channel_multipliers),
            "attention_heads": self.arch.attention_heads,
            "head_dim": self.arch.head_dim,
            "fourier_dim": self.arch.fourier_dim,
            "groups": self.arch.groups,
            "in_channels": self.in_channels,
            "scale": self.scale,
            "n_steps": self.n_steps,
            "use_flow": self.use_flow,
        }

    def downscale_frame(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic high-res estimate of one low-res frame [C, H, W]."""
        return self.downscaler(x.unsqueeze(0)).squeeze(0)

    def predict_flow(self, y_bar, y_prev, y_prev2):
        """Displacement field and per-level features from three high-res frames.

        Returns ``(flow [2, sH, sW], features)`` where features is one pair
        of maps per downsampling level of the flow U-Net, each kept with its
        leading batch axis in the form :meth:`denoise` consumes.
        """
        if self.flow_net is None:
            raise ConfigError("this model was built without a flow net")
        for name, f in (("y_bar", y_bar), ("y_prev", y_prev), ("y_prev2", y_prev2)):
            if f.shape != y_bar.shape:
                raise ValueError(f"{name} shape {tuple(f.shape)} != {tuple(y_bar.shape)}")
        rich = torch.cat([y_bar, y_prev, y_prev2], dim=0).unsqueeze(0)
        flow, features = self.flow_net(rich)
        return flow.squeeze(0), features

    def denoise(self, r_n, n: int, y_bar, y_tilde, flow_features=None, aux=None):
        """Predicted v for a noisy residual at step n, given the conditioning frames.

        Input channel order is fixed: noisy residual, warped prediction,
        bicubic frame, then any upsampled auxiliary channels.
        """
        if not 0 <= n <= self.n_steps:
            raise ValueError(f"step index {n} outside [0, {self.n_steps}]")
        if self.use_flow and flow_features is None:
            raise ConfigError("denoiser is flow-conditioned but flow_features is None")
        parts = [r_n, y_tilde, y_bar]
        if aux is not None:
            parts.append(aux)
        stacked = torch.cat(parts, dim=0).unsqueeze(0)
        expected = self.denoiser.stem.in_channels
        if stacked.shape[1] != expected:
            raise ValueError(
                f"denoiser expects {expected} input channels, got {stacked.shape[1]}"
            )
        out, _ = self.denoiser(
            stacked, step=n / self.n_steps,
            features=flow_features if self.use_flow else None,
        )
        return out.squeeze(0)


class EmaShadow:
    """Exponential moving average of a model's parameters.

    Construction copies the live parameters; each ``update`` moves the shadow
    as ``shadow <- decay * shadow + (1 - decay) * live``.
    """

    def __init__(self, model: nn.Module, decay: float):
        if not isinstance(decay, (int, float)) or not 0.0 <= decay < 1.0:
            raise ConfigError(f"ema decay must lie in [0, 1), got {decay!r}")
        self.decay = float(decay)
        self.shadow = {k: p.detach().clone() for k, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, p in model.named_parameters():
            self.shadow[k].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def shadow_model(self, model: nn.Module) -> nn.Module:
        """Deep copy of the model carrying the shadow parameters, in eval mode."""
        shadowed = copy.deepcopy(model)
        with torch.no_grad():
            for k, p in shadowed.named_parameters():
                p.copy_(self.shadow[k])
        return shadowed.eval()

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": self.shadow}

    def load_state_dict(self, state: dict) -> None:
        self.decay = state["decay"]
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}


def build_model(arch: ArchConfig, in_channels: int, scale: int, n_steps: int,
                ablation: str = "full") -> DownscalingModel:
    """Model for the requested pipeline variant.

    ``no_flow`` drops the flow net and its conditioning path;
    ``single_channel`` restricts the input to the precipitation channel.
    """
    if ablation not in ("full", "no_flow", "single_channel"):
        raise ConfigError(f"unknown ablation mode {ablation!r}")
    if ablation == "single_channel":
        in_channels = 1
    return DownscalingModel(
        arch, in_channels, scale, n_steps, use_flow=(ablation != "no_flow")
    )
