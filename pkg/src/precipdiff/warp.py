"""Differentiable bilinear warping of frames by dense displacement fields.

Backward-warping (gather) semantics: each output pixel reads the input at
its own coordinates plus the local displacement. Implemented with explicit
corner gathers rather than ``grid_sample`` so the operation differentiates
cleanly with respect to both the frame and the flow in any float dtype.
"""

from __future__ import annotations

import torch


def bilinear_warp(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp ``frame`` by ``flow``, sampling bilinearly with border clamping.

    ``frame`` is [C, H, W]; ``flow`` is [2, H, W] in pixels with channel 0
    the horizontal (column) displacement and channel 1 the vertical (row)
    displacement. Output pixel (i, j) samples the frame at
    ``(i + flow[1, i, j], j + flow[0, i, j])``; sample locations outside the
    frame clamp to the border.
    """
    if frame.ndim != 3 or flow.ndim != 3:
        raise ValueError(
            f"expected [C, H, W] frame and [2, H, W] flow, got {tuple(frame.shape)} "
            f"and {tuple(flow.shape)}"
        )
    if flow.shape[0] != 2 or frame.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"flow shape {tuple(flow.shape)} does not match frame {tuple(frame.shape)}"
        )
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")

    c, h, w = frame.shape
    rows = torch.arange(h, dtype=frame.dtype, device=frame.device).view(h, 1)
    cols = torch.arange(w, dtype=frame.dtype, device=frame.device).view(1, w)

    sample_y = (rows + flow[1]).clamp(0, h - 1)
    sample_x = (cols + flow[0]).clamp(0, w - 1)

    # Corner indices; keep y0/x0 one short of the last row/col so y0+1 is valid.
    y0 = sample_y.floor().clamp(0, max(h - 2, 0)).long()
    x0 = sample_x.floor().clamp(0, max(w - 2, 0)).long()
    y1 = (y0 + 1).clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)

    wy = sample_y - y0
    wx = sample_x - x0

    v00 = frame[:, y0, x0]
    v01 = frame[:, y0, x1]
    v10 = frame[:, y1, x0]
    v11 = frame[:, y1, x1]

    top = v00 * (1 - wx) + v01 * wx
    bottom = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bottom * wy
