"""Attention gate, spatial/channel attention and the co-attention gate.

All blocks take and return ``(B, C, H, W)`` tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    """Incompatible tensor shapes at a block junction."""


def f_int_for(out_channels: int) -> int:
    """Intermediate width of an attention gate: half the stage width, at least 8."""
    return max(out_channels // 2, 8)


class AttentionGate(nn.Module):
    """``x * sigmoid(BN(psi(relu(BN(W_x x) + BN(W_g g)))))``.

    The coefficient map has a single channel and is broadcast over x's channels.
    """

    def __init__(self, f_g: int, f_x: int, f_int: int):
        super().__init__()
        self.f_int = f_int
        self.W_g = nn.Sequential(nn.Conv2d(f_g, f_int, 1), nn.BatchNorm2d(f_int))
        self.W_x = nn.Sequential(nn.Conv2d(f_x, f_int, 1), nn.BatchNorm2d(f_int))
        self.psi = nn.Sequential(nn.Conv2d(f_int, 1, 1), nn.BatchNorm2d(1))

    def coefficients(self, g, x):
        if g.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"attention gate: gate {tuple(g.shape)} and input {tuple(x.shape)} "
                             "are not spatially aligned")
        return torch.sigmoid(self.psi(F.relu(self.W_x(x) + self.W_g(g))))

    def forward(self, g, x):
        return x * self.coefficients(g, x)


class SpatialAttention(nn.Module):
    """CBAM spatial gate from channel-wise max and mean maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def gate(self, f):
        pooled = torch.cat([f.amax(dim=1, keepdim=True), f.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, f):
        return f * self.gate(f)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation channel gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction or channels % reduction:
            raise ValueError(f"channel attention needs channels ({channels}) to be a multiple "
                             f"of the reduction ratio ({reduction})")
        self.reduction = reduction
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, f):
        s = f.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, f):
        return f * self.gate(f)[:, :, None, None]


@dataclass(frozen=True)
class AlignmentPolicy:
    down: str = "max"
    up: str = "bilinear"


def _resize(f, size: int, policy: AlignmentPolicy):
    h, w = f.shape[-2:]
    if h != w:
        raise ShapeError(f"expected a square feature map, got {h}x{w}")
    if h == size:
        return f
    big, small = max(h, size), min(h, size)
    ratio = big // small
    if big % small or ratio & (ratio - 1):
        raise ShapeError(f"cannot align resolution {h} to {size}: ratio is not a power of two")
    if h > size:
        if policy.down == "max":
            return F.max_pool2d(f, ratio)
        return F.avg_pool2d(f, ratio)
    return F.interpolate(f, size=(size, size), mode=policy.up, align_corners=False)


def align_streams(a, b, size: int, policy: AlignmentPolicy = AlignmentPolicy()):
    """Resize both maps to ``size x size``: max-pool down, bilinear up, channels untouched."""
    return _resize(a, size, policy), _resize(b, size, policy)


class Concat(nn.Module):
    """Align two streams and concatenate them (the no-attention fusion)."""

    def __init__(self, policy: AlignmentPolicy = AlignmentPolicy()):
        super().__init__()
        self.policy = policy

    def forward(self, a, b, size=None):
        size = a.shape[-1] if size is None else size
        a, b = align_streams(a, b, size, self.policy)
        return torch.cat([a, b], dim=1)


class CoAttentionGate(nn.Module):
    """Two attention gates with swapped roles, concatenated, then channel attention.

    ``forward(a, b)`` returns ``CA([AG(g=a, x=b), AG(g=b, x=a)])`` at resolution
    ``size`` (default: a's resolution). The output width is ``c_a + c_b``; with
    ``out_channels`` set, a 1x1 conv-BN-ReLU projection follows. ``channel_attention=False``
    gives the decoder variant (CoAG*).
    """

    def __init__(self, c_a: int, c_b: int, f_int: int, reduction: int = 16,
                 channel_attention: bool = True, out_channels: int | None = None,
                 policy: AlignmentPolicy = AlignmentPolicy()):
        super().__init__()
        self.policy = policy
        self.ag_1 = AttentionGate(f_g=c_a, f_x=c_b, f_int=f_int)
        self.ag_2 = AttentionGate(f_g=c_b, f_x=c_a, f_int=f_int)
        width = c_a + c_b
        self.ca = ChannelAttention(width, reduction) if channel_attention else nn.Identity()
        if out_channels is None:
            self.out_proj = nn.Identity()
            self.out_channels = width
        else:
            self.out_proj = nn.Sequential(nn.Conv2d(width, out_channels, 1, bias=False),
                                          nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))
            self.out_channels = out_channels

    def forward(self, a, b, size=None):
        size = a.shape[-1] if size is None else size
        a, b = align_streams(a, b, size, self.policy)
        gated = torch.cat([self.ag_1(a, b), self.ag_2(b, a)], dim=1)
        return self.out_proj(self.ca(gated))


def co_attention_gate_star(c_a: int, c_b: int, f_int: int, **kwargs) -> CoAttentionGate:
    """CoAG without the channel-attention stage."""
    return CoAttentionGate(c_a, c_b, f_int, channel_attention=False, **kwargs)
