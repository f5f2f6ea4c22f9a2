"""Neural building blocks shared by every generator.

Coordinate attention, the residual coordinate attention block (RCAB), the
encoder / decoder / bottleneck blocks of a feature embedding U-Net, and the
supervised color-consistency module (SCCM) that turns stage features into a
supervised image prediction.
"""

from __future__ import annotations

from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

LRELU_SLOPE = 0.2


class NonFiniteError(ValueError, FloatingPointError):
    """Raised for NaN/Inf tensors; a ValueError for callers, a FloatingPointError for trainers."""


def check_feature_map(f: torch.Tensor, name: str = "input") -> None:
    if f.dim() != 4:
        raise ValueError(f"{name} must be rank-4 (B, C, H, W), got shape {tuple(f.shape)}")
    if min(f.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {tuple(f.shape)}")
    if not torch.isfinite(f).all():
        raise NonFiniteError(f"{name} contains non-finite values")


class CoordAttention(nn.Module):
    """Coordinate attention.

    Pools the input along each spatial axis separately, runs both pooled
    strips through a shared 1x1 reduction, and produces one sigmoid gate per
    axis. The output is ``f * a_h * a_w`` with broadcasting.

    Args:
        channels: Number of input (and output) channels.
        reduction: Channel reduction ratio of the shared transform. Clamped
            to ``channels`` so that at least one hidden channel remains.
    """

    def __init__(self, channels: int, reduction: int = 8) -> None:
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {reduction}")
        self.channels = channels
        self.reduction = min(reduction, channels)
        hidden = max(1, channels // self.reduction)
        self.reduce = nn.Conv2d(channels, hidden, kernel_size=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.conv_h = nn.Conv2d(hidden, channels, kernel_size=1)
        self.conv_w = nn.Conv2d(hidden, channels, kernel_size=1)

    @staticmethod
    def pool(f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Axis average pools: (B,C,H,1) over width and (B,C,1,W) over height."""
        return f.mean(dim=3, keepdim=True), f.mean(dim=2, keepdim=True)

    def attention(self, f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h, w = f.shape[2], f.shape[3]
        pool_h, pool_w = self.pool(f)
        # (B,C,H,1) and (B,C,W,1) stacked along the spatial axis share one transform
        y = torch.cat([pool_h, pool_w.transpose(2, 3)], dim=2)
        y = self.act(self.reduce(y))
        y_h, y_w = torch.split(y, [h, w], dim=2)
        a_h = torch.sigmoid(self.conv_h(y_h))
        a_w = torch.sigmoid(self.conv_w(y_w)).transpose(2, 3)
        return a_h, a_w

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        check_feature_map(f)
        if f.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f.shape[1]}")
        a_h, a_w = self.attention(f)
        return f * a_h * a_w


class RCAB(nn.Module):
    """Residual coordinate attention block: ``f + CA(conv(lrelu(conv(f))))``."""

    def __init__(self, channels: int, reduction: int = 8, out_channels: int | None = None) -> None:
        super().__init__()
        if out_channels is not None and out_channels != channels:
            raise ValueError(
                f"residual branch would map {channels} -> {out_channels} channels; "
                "RCAB must preserve the channel count"
            )
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.attn = CoordAttention(channels, reduction)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f + self.attn(self.body(f))


def _check_even(f: torch.Tensor, what: str) -> None:
    h, w = f.shape[2], f.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"{what} needs even spatial dims, got H={h}, W={w}")


class EncoderBlock(nn.Module):
    """LeakyReLU -> 4x4 stride-2 conv -> RCAB -> InstanceNorm. Halves H and W."""

    def __init__(self, in_channels: int, out_channels: int, reduction: int = 8) -> None:
        super().__init__()
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.down = nn.Conv2d(in_channels, out_channels, 4, stride=2, padding=1)
        self.rcab = RCAB(out_channels, reduction)
        self.norm = nn.InstanceNorm2d(out_channels, affine=True)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _check_even(f, "encoder block")
        return self.norm(self.rcab(self.down(self.act(f))))


class DecoderBlock(nn.Module):
    """Upsampling mirror of :class:`EncoderBlock`.

    LeakyReLU -> 4x4 stride-2 transpose conv, concatenation with the skip
    tensor, a 1x1 conv back to ``out_channels``, then RCAB and InstanceNorm.
    """

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int,
                 reduction: int = 8) -> None:
        super().__init__()
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        self.merge = nn.Conv2d(out_channels + skip_channels, out_channels, 1)
        self.rcab = RCAB(out_channels, reduction)
        self.norm = nn.InstanceNorm2d(out_channels, affine=True)

    def forward(self, f: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if skip.shape[2] != 2 * f.shape[2] or skip.shape[3] != 2 * f.shape[3]:
            raise ValueError(
                f"skip spatial dims {tuple(skip.shape[2:])} must be twice the input's "
                f"{tuple(f.shape[2:])}"
            )
        up = self.up(self.act(f))
        x = self.merge(torch.cat([up, skip], dim=1))
        return self.norm(self.rcab(x))


class Bottleneck(nn.Module):
    """A single channel-preserving 3x3 conv; no attention at the coarsest level."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.conv(f)


def lift_channels(img: torch.Tensor, channels: int) -> torch.Tensor:
    """Broadcast a 1-channel image to ``channels`` channels (no-op if they match)."""
    c = img.shape[1]
    if c == channels:
        return img
    if c == 1:
        return img.expand(-1, channels, -1, -1)
    raise ValueError(f"cannot lift a {c}-channel image to {channels} channels")


class SCCM(nn.Module):
    """Supervised color-consistency module.

    Produces the stage prediction ``tanh(conv3x3(f) + lift(img))`` and the
    re-weighted features ``f + conv1x1(f) * sigmoid(conv1x1(pre_tanh))`` that
    feed the next stage.

    Args:
        channels: Feature width.
        out_channels: Channels of the emitted prediction (3 for RGB, 1 for
            grayscale/NIR).
        features: Build the feature path. The last stage has no consumer for
            its features, so it returns ``f`` unchanged and owns no gate.
    """

    def __init__(self, channels: int, out_channels: int = 3, features: bool = True) -> None:
        super().__init__()
        self.out_channels = out_channels
        self.to_img = nn.Conv2d(channels, out_channels, 3, padding=1)
        self.gate = nn.Conv2d(out_channels, channels, 1) if features else None
        self.feat = nn.Conv2d(channels, channels, 1) if features else None

    def forward(self, f: torch.Tensor, img: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if f.shape[2:] != img.shape[2:]:
            raise ValueError(
                f"image spatial dims {tuple(img.shape[2:])} do not match features "
                f"{tuple(f.shape[2:])}"
            )
        logits = self.to_img(f) + lift_channels(img, self.out_channels)
        if self.gate is None:
            return torch.tanh(logits), f
        a = torch.sigmoid(self.gate(logits))
        return torch.tanh(logits), f + self.feat(f) * a


def zero_parameters(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def upsample2x(f: torch.Tensor) -> torch.Tensor:
    return F.interpolate(f, scale_factor=2, mode="bilinear", align_corners=False)
