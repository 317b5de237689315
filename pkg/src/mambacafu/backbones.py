"""Four-stage pyramid feature extractors for the CNN and Transformer paths.

Parameter names follow the torchvision ResNet and the public PVTv2 layouts so
that pretrained arrays can be loaded by name with :func:`load_weights`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

PVT_SPECS = {
    # embed dims, heads, mlp ratios, depths, sr ratios, linear attention
    "V0": dict(dims=(32, 64, 160, 256), heads=(1, 2, 5, 8), mlp=(8, 8, 4, 4),
               depths=(2, 2, 2, 2), sr=(8, 4, 2, 1), linear=False),
    "V1": dict(dims=(64, 128, 320, 512), heads=(1, 2, 5, 8), mlp=(8, 8, 4, 4),
               depths=(3, 4, 6, 3), sr=(8, 4, 2, 1), linear=True),
}


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    stage_channels: tuple[int, ...]
    stage_strides: tuple[int, ...]

    def stage_resolutions(self, input_size: int) -> tuple[int, ...]:
        return tuple(input_size // s for s in self.stage_strides)


def cnn_spec(cfg: ModelConfig) -> BackboneSpec:
    kind = "tiny_cnn" if cfg.tiny else "cnn_resnet18_class"
    return BackboneSpec(kind, cfg.cnn_channels, (2, 4, 8, 16))


def transformer_spec(cfg: ModelConfig) -> BackboneSpec:
    kind = "tiny_transformer" if cfg.tiny else "transformer_pvtv2_class"
    return BackboneSpec(kind, cfg.transformer_channels, (4, 8, 16, 32))


# -- CNN path -------------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                            nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


def _layer(in_ch, out_ch, blocks, stride):
    return nn.Sequential(BasicBlock(in_ch, out_ch, stride),
                         *[BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)])


class ResNetPyramid(nn.Module):
    """ResNet-18-style trunk tapped after the stem, layer1, layer2 and layer3.

    ``keep_layer4`` retains the (unused) last stage so a full ResNet-18 trunk
    checkpoint loads without remapping.
    """

    def __init__(self, in_ch: int = 3, widths=(64, 64, 128, 256, 512), blocks=(2, 2, 2, 2),
                 keep_layer4: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, widths[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = _layer(widths[0], widths[1], blocks[0], 1)
        self.layer2 = _layer(widths[1], widths[2], blocks[1], 2)
        self.layer3 = _layer(widths[2], widths[3], blocks[2], 2)
        self.layer4 = _layer(widths[3], widths[4], blocks[3], 2) if keep_layer4 else None
        self.out_channels = tuple(widths[:4])

    def forward(self, image):
        r0 = F.relu(self.bn1(self.conv1(image)))
        r1 = self.layer1(self.maxpool(r0))
        r2 = self.layer2(r1)
        r3 = self.layer3(r2)
        return r0, r1, r2, r3


# -- Transformer path -----------------------------------------------------------

class OverlapPatchEmbed(nn.Module):
    def __init__(self, patch_size: int, stride: int, in_ch: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, patch_size, stride, patch_size // 2)
        self.norm = nn.LayerNorm(dim, eps=1e-6)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class DWConv(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 3, 1, 1, groups=dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w))
        return x.flatten(2).transpose(1, 2)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, linear: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DWConv(hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.linear = linear

    def forward(self, x, h, w):
        x = self.fc1(x)
        if self.linear:
            x = F.relu(x)
        return self.fc2(F.gelu(self.dwconv(x, h, w)))


class SRAttention(nn.Module):
    """Multi-head attention with spatially reduced keys/values.

    ``linear=True`` pools keys/values to a fixed 7x7 grid (PVTv2 "linear").
    """

    def __init__(self, dim: int, heads: int, sr_ratio: int = 1, linear: bool = False, pool: int = 7):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        self.linear = linear
        self.pool_size = pool
        if linear:
            self.pool = nn.AdaptiveAvgPool2d(pool)
            self.sr = nn.Conv2d(dim, dim, 1)
            self.norm = nn.LayerNorm(dim, eps=1e-5)
        elif sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.norm = nn.LayerNorm(dim, eps=1e-5)

    def kv_tokens(self, h: int, w: int) -> int:
        if self.linear:
            return self.pool_size ** 2
        if self.sr_ratio > 1:
            return (h // self.sr_ratio) * (w // self.sr_ratio)
        return h * w

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.linear or self.sr_ratio > 1:
            x_ = x.transpose(1, 2).reshape(b, c, h, w)
            if self.linear:
                x_ = self.sr(self.pool(x_))
            else:
                x_ = self.sr(x_)
            x_ = self.norm(x_.flatten(2).transpose(1, 2))
            if self.linear:
                x_ = F.gelu(x_)
        else:
            x_ = x
        kv = self.kv(x_).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class PVTBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, sr_ratio, linear):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SRAttention(dim, heads, sr_ratio, linear)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), linear)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class PVTPyramid(nn.Module):
    """PVTv2-family pyramid; returns the four stage outputs as ``(B, C, H, W)``."""

    def __init__(self, in_ch=3, dims=(64, 128, 320, 512), heads=(1, 2, 5, 8), mlp=(8, 8, 4, 4),
                 depths=(3, 4, 6, 3), sr=(8, 4, 2, 1), linear=False):
        super().__init__()
        self.out_channels = tuple(dims)
        for i in range(4):
            embed = OverlapPatchEmbed(7 if i == 0 else 3, 4 if i == 0 else 2,
                                      in_ch if i == 0 else dims[i - 1], dims[i])
            blocks = nn.ModuleList(PVTBlock(dims[i], heads[i], mlp[i], sr[i], linear)
                                   for _ in range(depths[i]))
            setattr(self, f"patch_embed{i + 1}", embed)
            setattr(self, f"block{i + 1}", blocks)
            setattr(self, f"norm{i + 1}", nn.LayerNorm(dims[i], eps=1e-6))
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def forward(self, image):
        feats = []
        x = image
        for i in range(1, 5):
            x, h, w = getattr(self, f"patch_embed{i}")(x)
            for blk in getattr(self, f"block{i}"):
                x = blk(x, h, w)
            x = getattr(self, f"norm{i}")(x)
            x = x.transpose(1, 2).reshape(x.shape[0], -1, h, w)
            feats.append(x)
        return tuple(feats)


def build_cnn(cfg: ModelConfig) -> ResNetPyramid:
    if cfg.tiny:
        c = cfg.cnn_channels
        return ResNetPyramid(cfg.in_channels, (c[0], c[1], c[2], c[3], c[3] * 2), (1, 1, 1, 1),
                             keep_layer4=False)
    return ResNetPyramid(cfg.in_channels)


def build_transformer(cfg: ModelConfig) -> PVTPyramid:
    spec = dict(PVT_SPECS[cfg.variant])
    if cfg.tiny:
        spec["dims"] = cfg.transformer_channels
        spec["heads"] = tuple(max(1, d // 8) for d in spec["dims"])
        spec["depths"] = (1, 1, 1, 1)
    return PVTPyramid(cfg.in_channels, **spec)


# -- weight files ---------------------------------------------------------------

def weight_manifest(module: nn.Module) -> dict[str, tuple[int, ...]]:
    """Names and shapes expected in a weight archive for ``module``."""
    return {k: tuple(v.shape) for k, v in module.state_dict().items()}


def save_weights(module: nn.Module, path: str | Path) -> None:
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})


def load_weights(module: nn.Module, path: str | Path, allow_partial: bool = False) -> list[str]:
    """Load a named-array archive into ``module``; returns the names that were assigned.

    Every array is shape-checked before anything is assigned. Missing or unexpected
    names are an error unless ``allow_partial`` is set.
    """
    expected = weight_manifest(module)
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    bad = [f"{k}: file {arrays[k].shape} vs model {expected[k]}"
           for k in arrays if k in expected and tuple(arrays[k].shape) != expected[k]]
    if bad:
        raise ValueError("shape mismatch in weight file: " + "; ".join(bad))
    missing = sorted(set(expected) - set(arrays))
    unexpected = sorted(set(arrays) - set(expected))
    if (missing or unexpected) and not allow_partial:
        raise ValueError(f"partial weight match: {len(missing)} missing, {len(unexpected)} unexpected "
                         f"(first missing: {missing[:3]}, first unexpected: {unexpected[:3]})")
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items() if k in expected}
    module.load_state_dict(state, strict=False)
    return sorted(state)
