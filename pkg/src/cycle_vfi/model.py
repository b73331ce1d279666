"""Flow-based interpolation network: bidirectional flow, intermediate flow
refinement with visibility, and normalized warp-and-blend synthesis."""
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import CheckpointError, ConfigurationError
from .warp import bilinear_sample

CHECKPOINT_FORMAT = "cycle_vfi/1"
Z_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 16
    depth: int = 4
    max_width: int = 128
    convs_per_level: int = 2
    # networks run at 1/downsample resolution; flows are upsampled and rescaled
    downsample: int = 1

    def __post_init__(self):
        if min(self.base_width, self.depth, self.convs_per_level, self.downsample) < 1:
            raise ConfigurationError(f"invalid architecture config: {self}")

    @property
    def min_size(self) -> int:
        return self.downsample * 2 ** (self.depth - 1)

    def widths(self) -> List[int]:
        return [min(self.base_width * 2 ** i, self.max_width) for i in range(self.depth)]


def _block(cin, cout, n):
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1),
                   nn.LeakyReLU(0.1, inplace=True)]
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Encoder-decoder with skip connections.

    Inputs whose sides are not divisible by ``2 ** (depth - 1)`` are
    replicate-padded and the output is cropped back.
    """

    def __init__(self, in_channels, out_channels, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        n = config.convs_per_level
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_block(cin, w, n))
            cin = w
        self.up = nn.ModuleList()
        for lvl in range(len(widths) - 2, -1, -1):
            self.up.append(_block(widths[lvl + 1] + widths[lvl], widths[lvl], n))
        self.head = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** (self.config.depth - 1)
        if min(h, w) < m:
            raise ConfigurationError(
                f"input {h}x{w} is below the network floor of {m}x{m} pixels")
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)[..., :h, :w]


class SynthesisResult(NamedTuple):
    frame: torch.Tensor
    flow_01: torch.Tensor
    flow_10: torch.Tensor
    flow_t0: torch.Tensor
    flow_t1: torch.Tensor
    vis_0: torch.Tensor
    vis_1: torch.Tensor


def check_time(t, closed=False):
    tt = torch.as_tensor(t, dtype=torch.float64)
    lo_ok = (tt >= 0) if closed else (tt > 0)
    hi_ok = (tt <= 1) if closed else (tt < 1)
    if not bool((lo_ok & hi_ok).all()):
        interval = "[0, 1]" if closed else "(0, 1)"
        raise ValueError(f"time must lie in {interval}, got {t}")


def _time_tensor(t, like: torch.Tensor) -> torch.Tensor:
    """Broadcastable ``(N, 1, 1, 1)`` time tensor."""
    tt = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if tt.dim() == 0:
        tt = tt.expand(like.shape[0])
    return tt.reshape(-1, 1, 1, 1)


def initial_intermediate_flows(flow_01, flow_10, t):
    """Linear-motion estimates of the flows from time ``t`` back to each input."""
    t = _time_tensor(t, flow_01)
    flow_t0 = -t * (1 - t) * flow_01 + t * t * flow_10
    flow_t1 = (1 - t) ** 2 * flow_01 - t * (1 - t) * flow_10
    return flow_t0, flow_t1


def warp_blend(i0, i1, flow_t0, flow_t1, vis_0, vis_1, t, clamp=True):
    """Visibility-weighted, time-weighted blend of both warped inputs.

    ``t`` may be a scalar or a per-sample tensor and is accepted on the
    closed interval. The normalizer is floored at ``1e-12``.
    """
    check_time(t, closed=True)
    if not (i0.shape == i1.shape and flow_t0.shape == flow_t1.shape
            and vis_0.shape == vis_1.shape
            and i0.shape[-2:] == flow_t0.shape[-2:] == vis_0.shape[-2:]):
        raise ValueError("warp_blend inputs disagree in spatial shape")
    tt = _time_tensor(t, i0) if i0.dim() == 4 else torch.as_tensor(t, dtype=i0.dtype)
    w0 = (1 - tt) * vis_0
    w1 = tt * vis_1
    z = (w0 + w1).clamp_min(Z_EPS)
    out = (w0 * bilinear_sample(i0, flow_t0) + w1 * bilinear_sample(i1, flow_t1)) / z
    return out.clamp(0, 1) if clamp else out


class InterpolationModel(nn.Module):
    """Synthesizes the frame at time ``t`` between two inputs.

    Frames are ``(N, 3, H, W)`` tensors in [0, 1]. The forward pass returns
    the unclamped frame so losses keep their gradients; use ``clamp=True``
    for export.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.flow_net = UNet(6, 4, self.config)
        # inputs, warped inputs, initial flows, time plane
        self.refine_net = UNet(17, 5, self.config)

    def _run(self, net, x, n_flow):
        h, w = x.shape[-2:]
        m = self.config.min_size
        if min(h, w) < m:
            raise ConfigurationError(
                f"input {h}x{w} is below the network floor of {m}x{m} pixels")
        d = self.config.downsample
        if d == 1:
            return net(x)
        ph, pw = (-h) % d, (-w) % d
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        out = net(F.avg_pool2d(x, d))
        out = F.interpolate(out, scale_factor=d, mode="bilinear", align_corners=False)
        scale = torch.ones(out.shape[1], 1, 1, dtype=out.dtype, device=out.device)
        scale[:n_flow] = d
        return (out * scale)[..., :h, :w]

    def estimate_bidirectional_flow(self, i0, i1):
        if i0.shape != i1.shape:
            raise ValueError(f"frame shapes differ: {tuple(i0.shape)} vs {tuple(i1.shape)}")
        out = self._run(self.flow_net, torch.cat([i0 - 0.5, i1 - 0.5], dim=1), 4)
        return out[:, :2], out[:, 2:]

    def intermediate_flow_and_visibility(self, i0, i1, flow_01, flow_10, t):
        check_time(t)
        ft0, ft1 = initial_intermediate_flows(flow_01, flow_10, t)
        g0 = bilinear_sample(i0, ft0)
        g1 = bilinear_sample(i1, ft1)
        plane = _time_tensor(t, i0).expand(i0.shape[0], 1, *i0.shape[-2:])
        out = self._run(self.refine_net, torch.cat([i0 - 0.5, i1 - 0.5, g0 - 0.5, g1 - 0.5,
                                                    ft0, ft1, plane], dim=1), 4)
        ft0 = ft0 + out[:, 0:2]
        ft1 = ft1 + out[:, 2:4]
        vis_0 = torch.sigmoid(out[:, 4:5])
        return ft0, ft1, vis_0, 1 - vis_0

    def synthesize(self, i0, i1, t, clamp=False) -> SynthesisResult:
        check_time(t)
        f01, f10 = self.estimate_bidirectional_flow(i0, i1)
        ft0, ft1, v0, v1 = self.intermediate_flow_and_visibility(i0, i1, f01, f10, t)
        frame = warp_blend(i0, i1, ft0, ft1, v0, v1, t, clamp=clamp)
        return SynthesisResult(frame, f01, f10, ft0, ft1, v0, v1)

    def forward(self, i0, i1, t, clamp=False):
        return self.synthesize(i0, i1, t, clamp=clamp).frame

    @torch.no_grad()
    def multi_frame_interpolate(self, i0, i1, n: int) -> List[torch.Tensor]:
        """``n`` clamped frames at ``t = i / (n + 1)``, in temporal order."""
        if n < 0:
            raise ValueError("n must be non-negative")
        return [self(i0, i1, i / (n + 1), clamp=True) for i in range(1, n + 1)]


def interpolation_times(n: int) -> List[float]:
    return [i / (n + 1) for i in range(1, n + 1)]


def save_checkpoint(path: Union[str, Path], model: InterpolationModel, step: int = 0,
                    **extra) -> None:
    """Write a single archive; the file is replaced atomically."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "flow_net": model.flow_net.state_dict(),
        "refine_net": model.refine_net.state_dict(),
        "step": int(step),
        **extra,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path: Union[str, Path]) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return payload


def model_from_payload(payload: dict, expected: Optional[ModelConfig] = None) -> InterpolationModel:
    config = ModelConfig(**payload["config"])
    if expected is not None and config != expected:
        raise ConfigurationError(
            f"checkpoint architecture {config} does not match expected {expected}")
    model = InterpolationModel(config)
    try:
        model.flow_net.load_state_dict(payload["flow_net"])
        model.refine_net.load_state_dict(payload["refine_net"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"parameter sets do not match architecture: {exc}") from exc
    return model


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> InterpolationModel:
    return model_from_payload(read_checkpoint(path), expected)


def parameters_bytes(model: nn.Module) -> bytes:
    """Raw parameter bytes, for bitwise frozen-ness audits."""
    buf = io.BytesIO()
    for name, p in sorted(model.state_dict().items()):
        buf.write(name.encode())
        buf.write(p.detach().cpu().contiguous().numpy().tobytes())
    return buf.getvalue()
