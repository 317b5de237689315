"""Selective state-space scan, four-direction 2D scan, MambaConv and residual conv blocks.

Recurrence per channel ``c`` (state size ``N``)::

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D * u_t,        h_0 = 0

``A = -exp(A_log)`` is strictly negative, ``delta = softplus(.) > 0``.
"""
from __future__ import annotations

import math
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

SCAN_BLOCK = 8


def selective_scan_ref(u, delta, A, B, C, D):
    """Step-by-step reference recurrence.

    Shapes: u, delta ``(batch, L, ch)``; A ``(ch, N)``; B, C ``(batch, L, N)``;
    D ``(ch,)``. Returns y with the shape of u.
    """
    batch, length, ch = u.shape
    h = u.new_zeros(batch, ch, A.shape[1])
    ys = []
    for t in range(length):
        dt = delta[:, t, :, None]
        h = torch.exp(dt * A) * h + dt * B[:, t, None, :] * u[:, t, :, None]
        ys.append((h * C[:, t, None, :]).sum(-1) + D * u[:, t])
    return torch.stack(ys, dim=1)


def _shift(x, d, fill):
    pad = torch.full_like(x[:, :d], fill)
    return torch.cat([pad, x[:, :-d]], dim=1)


def _scan_block(a, b):
    # Hillis-Steele inclusive scan of h_t = a_t h_{t-1} + b_t along dim 1.
    d = 1
    length = a.shape[1]
    while d < length:
        b = torch.cat([b[:, :d], b[:, d:] + a[:, d:] * b[:, :-d]], dim=1)
        a = torch.cat([a[:, :d], a[:, d:] * a[:, :-d]], dim=1)
        d *= 2
    return a, b


def linear_recurrence(a, b, block: int | None = None):
    """Solve ``h_t = a_t * h_{t-1} + b_t`` (h_0 = 0) along dim 1.

    Two-level parallel scan: every block of ``block`` steps is scanned in
    log2(block) vectorised sweeps, the block carries are solved recursively,
    then folded back in. Only products of the decay terms are formed, so the
    result stays bounded for ``|a| <= 1``.
    """
    block = block or SCAN_BLOCK
    batch, length = a.shape[:2]
    if length <= block:
        return _scan_block(a, b)[1]
    n_blocks = -(-length // block)
    pad = n_blocks * block - length
    if pad:
        a = torch.cat([a, a.new_ones(batch, pad, *a.shape[2:])], dim=1)
        b = torch.cat([b, b.new_zeros(batch, pad, *b.shape[2:])], dim=1)
    rest = a.shape[2:]
    a = a.reshape(batch * n_blocks, block, *rest)
    b = b.reshape(batch * n_blocks, block, *rest)
    a_cum, h_local = _scan_block(a, b)
    a_cum = a_cum.reshape(batch, n_blocks, block, *rest)
    h_local = h_local.reshape(batch, n_blocks, block, *rest)
    carry = linear_recurrence(a_cum[:, :, -1], h_local[:, :, -1], block)
    carry = _shift(carry, 1, 0.0)
    h = h_local + a_cum * carry[:, :, None]
    return h.reshape(batch, n_blocks * block, *rest)[:, :length]


def selective_scan(u, delta, A, B, C, D, block: int | None = None):
    """Parallel-scan evaluation of the same recurrence as :func:`selective_scan_ref`."""
    dt = delta.unsqueeze(-1)
    a = torch.exp(dt * A)
    b = dt * B.unsqueeze(2) * u.unsqueeze(-1)
    h = linear_recurrence(a, b, block)
    return (h * C.unsqueeze(2)).sum(-1) + D * u


def state_bound(u, delta, A, B) -> torch.Tensor:
    """Geometric upper bound on ``max |h_t|`` for the given inputs."""
    decay = torch.exp(delta.unsqueeze(-1) * A).amax()
    drive = (delta.unsqueeze(-1) * B.unsqueeze(2) * u.unsqueeze(-1)).abs().amax()
    return drive / (1.0 - decay)


class SelectiveScan1d(nn.Module):
    """Input-dependent SSM over a ``(batch, L, ch)`` sequence."""

    def __init__(self, channels: int, state_dim: int = 16, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        self.delta_proj = nn.Linear(channels, channels)
        self.B_proj = nn.Linear(channels, state_dim, bias=False)
        self.C_proj = nn.Linear(channels, state_dim, bias=False)
        A = torch.arange(1.0, state_dim + 1).repeat(channels, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(channels))

        nn.init.uniform_(self.delta_proj.weight, -channels ** -0.5, channels ** -0.5)
        dt = torch.exp(torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.delta_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    @property
    def A(self):
        return -torch.exp(self.A_log)

    def project(self, u):
        return F.softplus(self.delta_proj(u)), self.B_proj(u), self.C_proj(u)

    def forward(self, u, reference: bool = False):
        delta, B, C = self.project(u)
        scan = selective_scan_ref if reference else selective_scan
        return scan(u, delta, self.A, B, C, self.D)


class ScanPath(str, Enum):
    row_lr = "row_lr"  # rows top to bottom, each left to right
    row_rl = "row_rl"  # rows top to bottom, each right to left
    col_tb = "col_tb"  # columns left to right, each top to bottom
    col_bt = "col_bt"  # columns left to right, each bottom to top


def flatten_path(f, path: ScanPath):
    """``(B, C, H, W)`` -> ``(B, H*W, C)`` in the traversal order of ``path``."""
    if path is ScanPath.row_rl:
        f = f.flip(-1)
    elif path is ScanPath.col_tb:
        f = f.transpose(-1, -2)
    elif path is ScanPath.col_bt:
        f = f.flip(-2).transpose(-1, -2)
    return f.flatten(2).transpose(1, 2)


def unflatten_path(seq, path: ScanPath, height: int, width: int):
    """Inverse of :func:`flatten_path`."""
    b, _, c = seq.shape
    f = seq.transpose(1, 2)
    if path in (ScanPath.col_tb, ScanPath.col_bt):
        f = f.reshape(b, c, width, height).transpose(-1, -2)
        return f.flip(-2) if path is ScanPath.col_bt else f
    f = f.reshape(b, c, height, width)
    return f.flip(-1) if path is ScanPath.row_rl else f


class SS2D(nn.Module):
    """Four directional selective scans with separate parameters, merged by summation."""

    paths = tuple(ScanPath)

    def __init__(self, channels: int, state_dim: int = 16):
        super().__init__()
        self.scans = nn.ModuleList(SelectiveScan1d(channels, state_dim) for _ in self.paths)

    def forward(self, f, reference: bool = False):
        _, _, h, w = f.shape
        out = None
        # fixed summation order keeps results reproducible
        for path, scan in zip(self.paths, self.scans):
            y = unflatten_path(scan(flatten_path(f, path), reference=reference), path, h, w)
            out = y if out is None else out + y
        return out


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis at every spatial position of ``(B, C, H, W)``."""

    def forward(self, f):
        return super().forward(f.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def conv_bn_relu(in_ch: int, out_ch: int, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class DoubleConvBlock(nn.Module):
    """Two 3x3 conv-BN-ReLU stages plus a residual skip (1x1 conv-BN when widths differ)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(conv_bn_relu(in_ch, out_ch), conv_bn_relu(out_ch, out_ch))
        if in_ch == out_ch:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, f):
        return self.body(f) + self.skip(f)


class ResidualBlock(DoubleConvBlock):
    """Same topology as :class:`DoubleConvBlock`; the convolutional half of MambaConv."""


class MambaConv(nn.Module):
    """``ResB(f + SS2D(LN(f)))``."""

    def __init__(self, in_ch: int, out_ch: int, state_dim: int = 16):
        super().__init__()
        self.norm = ChannelLayerNorm(in_ch)
        self.ss2d = SS2D(in_ch, state_dim)
        self.resb = ResidualBlock(in_ch, out_ch)

    def forward(self, f):
        return self.resb(f + self.ss2d(self.norm(f)))
