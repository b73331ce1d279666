"""Backward warping and finite-difference primitives.

Tensors follow the ``(N, C, H, W)`` layout; 3-D ``(C, H, W)`` inputs are
accepted and returned unbatched. Flow channel 0 is the horizontal
displacement and channel 1 the vertical one, both in pixels.
"""
from typing import Tuple

import torch


def _batched(x: torch.Tensor, name: str) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"{name} must be (C, H, W) or (N, C, H, W), got shape {tuple(x.shape)}")


def bilinear_sample(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` at ``(x + flow_x, y + flow_y)`` with bilinear weights.

    Coordinates falling outside the raster are clamped to the nearest edge,
    so the output is always a convex combination of source pixels.
    Differentiable with respect to both ``src`` and ``flow``.
    """
    src_b, squeeze = _batched(src, "src")
    flow_b, _ = _batched(flow, "flow")
    n, c, h, w = src_b.shape
    if flow_b.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow_b.shape[1]}")
    if flow_b.shape[0] != n or flow_b.shape[2:] != (h, w):
        raise ValueError(
            f"shape mismatch: src {tuple(src.shape)} vs flow {tuple(flow.shape)}")
    if not torch.isfinite(flow_b).all():
        raise ValueError("flow contains non-finite values")

    ys = torch.arange(h, dtype=flow_b.dtype, device=flow_b.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow_b.dtype, device=flow_b.device).view(1, 1, w)
    px = (xs + flow_b[:, 0]).clamp(0, w - 1)
    py = (ys + flow_b[:, 1]).clamp(0, h - 1)

    x0 = px.detach().floor()
    y0 = py.detach().floor()
    wx = px - x0
    wy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src_b.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = ((1 - wy) * ((1 - wx) * gather(y0, x0) + wx * gather(y0, x1))
           + wy * ((1 - wx) * gather(y1, x0) + wx * gather(y1, x1)))
    return out[0] if squeeze else out


def spatial_gradient(field: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along width and height.

    The last column of ``dx`` and the last row of ``dy`` are zero, so a
    collapsed axis (size 1) yields an all-zero gradient.
    """
    dx = torch.zeros_like(field)
    dy = torch.zeros_like(field)
    dx[..., :, :-1] = field[..., :, 1:] - field[..., :, :-1]
    dy[..., :-1, :] = field[..., 1:, :] - field[..., :-1, :]
    return dx, dy
