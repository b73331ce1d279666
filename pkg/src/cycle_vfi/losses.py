"""Training objectives: cycle reconstruction, pseudo supervision, perceptual,
warping and smoothness terms, and their weighted sum.

Every norm is mean-reduced over batch, channels and pixels.
"""
import math
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn as nn

from .exceptions import NumericalError
from .warp import bilinear_sample, spatial_gradient


@dataclass(frozen=True)
class LossWeights:
    lambda_rc: float = 0.8
    lambda_rp: float = 0.8
    lambda_p: float = 0.05
    lambda_w: float = 0.4
    lambda_s: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    rc: torch.Tensor
    rp: torch.Tensor
    p: torch.Tensor
    w: torch.Tensor
    s: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a, b):
    _check_same(a, b)
    return (a - b).abs().mean()


def cycle_reconstruction_loss(i1_hat, i1):
    return l1(i1_hat, i1)


def pseudo_supervised_loss(student_t, student_t1, teacher_t, teacher_t1):
    """L1 pull of both hidden frames towards the frozen teacher's predictions.

    Teacher outputs are detached here, so no gradient ever reaches the teacher.
    """
    return l1(student_t, teacher_t.detach()) + l1(student_t1, teacher_t1.detach())


class RandomConvFeatures(nn.Module):
    """Frozen stack of four strided 3x3 convolutions with seeded random weights."""

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            cin = w
        self.net = nn.Sequential(*layers)
        self.identifier = f"random-conv4-seed{seed}"
        self.min_size = 2 ** len(widths)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self.min_size:
            raise ValueError(
                f"feature extractor {self.identifier} needs frames of at least "
                f"{self.min_size}x{self.min_size}, got {h}x{w}")
        return self.net(x - 0.5)


class IdentityFeatures(nn.Module):
    identifier = "identity"
    min_size = 1

    def forward(self, x):
        return x


def vgg16_conv4_3(weights="DEFAULT"):
    """torchvision VGG-16 truncated after ``conv4_3`` + ReLU, ImageNet-normalized input."""
    from torchvision.models import vgg16

    features = vgg16(weights=weights).features[:23]

    class _VGG(nn.Module):
        identifier = "vgg16-conv4_3"
        min_size = 8

        def __init__(self):
            super().__init__()
            self.features = features
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

        def forward(self, x):
            return self.features((x - self.mean) / self.std)

    module = _VGG()
    module.requires_grad_(False)
    return module.eval()


def perceptual_loss(i1_hat, i1, psi: nn.Module):
    _check_same(i1_hat, i1)
    return ((psi(i1_hat) - psi(i1)) ** 2).mean()


def warping_loss(i0, i1, i2, flow_10, flow_01, flow_21, flow_12,
                 hidden_t, hidden_t1, flow_t_t1, flow_t1_t):
    """Six photometric terms: each frame of a pair, warped by the flow towards
    it, should reproduce its partner. Covers (I0, I1), (I1, I2) and the hidden
    pair."""
    named = dict(flow_10=flow_10, flow_01=flow_01, flow_21=flow_21, flow_12=flow_12,
                 hidden_t=hidden_t, hidden_t1=hidden_t1,
                 flow_t_t1=flow_t_t1, flow_t1_t=flow_t1_t)
    missing = [k for k, v in named.items() if v is None]
    if missing:
        raise ValueError(f"warping loss is missing inputs: {missing}")
    return (l1(bilinear_sample(i0, flow_10), i1)
            + l1(bilinear_sample(i1, flow_01), i0)
            + l1(bilinear_sample(i1, flow_21), i2)
            + l1(bilinear_sample(i2, flow_12), i1)
            + l1(bilinear_sample(hidden_t, flow_t1_t), hidden_t1)
            + l1(bilinear_sample(hidden_t1, flow_t_t1), hidden_t))


def pair_warping_loss(a, b, flow_ab, flow_ba):
    """The two terms of the warping loss for a single frame pair."""
    return l1(bilinear_sample(a, flow_ba), b) + l1(bilinear_sample(b, flow_ab), a)


def flow_smoothness(flow):
    dx, dy = spatial_gradient(flow)
    return dx.abs().mean() + dy.abs().mean()


def smoothness_loss(*flows):
    if not flows:
        raise ValueError("no flow fields given")
    for f in flows[1:]:
        _check_same(flows[0], f)
    return sum(flow_smoothness(f) for f in flows)


def long_step_loss(model, i0, i1, i2):
    """Reconstruct the middle frame directly from the outer two at t = 0.5."""
    return l1(model(i0, i2, 0.5), i1)


def total_loss(rc, rp, p, w, s, weights: Optional[LossWeights] = None) -> LossBreakdown:
    weights = weights or LossWeights()
    parts = {"rc": rc, "rp": rp, "p": p, "w": w, "s": s}
    for name, v in parts.items():
        v = torch.as_tensor(v)
        if not bool(torch.isfinite(v).all()):
            raise NumericalError(name, float(v))
    total = (weights.lambda_rc * rc + weights.lambda_rp * rp + weights.lambda_p * p
             + weights.lambda_w * w + weights.lambda_s * s)
    return LossBreakdown(**{k: torch.as_tensor(v) for k, v in parts.items()},
                         total=torch.as_tensor(total))
