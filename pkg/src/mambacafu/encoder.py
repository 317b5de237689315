"""Three-path encoder: CNN and Transformer pyramids plus the Mamba-based fusion path."""
from __future__ import annotations

import json
from typing import IO

import torch
import torch.nn as nn

from .attention import (AttentionGate, CoAttentionGate, Concat, ShapeError, SpatialAttention,
                        align_streams, f_int_for)
from .backbones import build_cnn, build_transformer
from .config import ModelConfig, check_config, shape_table
from .ssm import DoubleConvBlock, MambaConv


class StageError(RuntimeError):
    """A shape contract failed inside a named stage."""


def _fusion(c_a: int, c_b: int, c_out: int, cfg: ModelConfig, use_coag: bool) -> nn.Module:
    if use_coag:
        return CoAttentionGate(c_a, c_b, f_int_for(c_out), reduction=cfg.ca_reduction)
    return Concat()


def _refine(c_in: int, c_out: int, cfg: ModelConfig, use_mamba: bool) -> nn.Module:
    if use_mamba:
        return MambaConv(c_in, c_out, cfg.ssm_state_dim)
    return DoubleConvBlock(c_in, c_out)


class CoASMambaStage(nn.Module):
    """``MambaConv(AG(SA(r), CoAG(x, t)))`` at the CNN feature's resolution.

    The CoAG output keeps the concatenated width; MambaConv's residual block
    widens it to the stage width. Disabled sub-blocks fall back to
    concatenation / double convolution, and without the CNN branch the
    SA + AG pair is dropped.
    """

    def __init__(self, c_t: int, c_x: int, c_r: int, c_out: int, cfg: ModelConfig):
        super().__init__()
        flags = cfg.ablation
        self.enabled = flags.use_coasmamba
        self.use_r = flags.use_resnet_branch
        if self.enabled:
            self.fuse = _fusion(c_x, c_t, c_out, cfg, flags.use_coag)
            width = c_x + c_t
            if self.use_r:
                self.sa = SpatialAttention()
                self.ag = AttentionGate(f_g=c_r, f_x=width, f_int=f_int_for(c_out))
            self.refine = _refine(width, c_out, cfg, flags.use_mambaconv)
        else:
            self.fuse = Concat()
            self.refine = DoubleConvBlock(c_x + c_t + (c_r if self.use_r else 0), c_out)

    def forward(self, t, x, r=None):
        size = x.shape[-1] // 2 if r is None else r.shape[-1]
        fused = self.fuse(x, t, size)
        if self.use_r:
            if not self.enabled:
                fused = torch.cat([fused, r], dim=1)
            else:
                fused = self.ag(self.sa(r), fused)
        return self.refine(fused)


class CoAMambaBottleneck(nn.Module):
    """``AAP(MambaConv(CoAG(x_3, x_4)))``; fusion happens at x_3's resolution."""

    def __init__(self, c3: int, c4: int, c_out: int, pool: int, cfg: ModelConfig):
        super().__init__()
        flags = cfg.ablation
        on = flags.use_coamamba
        self.fuse = _fusion(c3, c4, c_out, cfg, on and flags.use_coag)
        self.refine = _refine(c3 + c4, c_out, cfg, on and flags.use_mambaconv)
        self.pool = nn.AdaptiveAvgPool2d(pool)

    def forward(self, x3, x4, return_pre_pool: bool = False):
        pre = self.refine(self.fuse(x3, x4, x3.shape[-1]))
        out = self.pool(pre)
        return (out, pre) if return_pre_pool else out


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = check_config(cfg)
        self.use_r = cfg.ablation.use_resnet_branch
        self.transformer = build_transformer(cfg)
        self.cnn = build_cnn(cfg) if self.use_r else None
        self.stem = DoubleConvBlock(cfg.in_channels, cfg.stem_channels)
        xs = (cfg.stem_channels, *cfg.stage_channels)
        ts, rs = cfg.transformer_channels, cfg.cnn_channels
        self.stages = nn.ModuleList(CoASMambaStage(ts[i], xs[i], rs[i], xs[i + 1], cfg) for i in range(4))
        self.bottleneck = CoAMambaBottleneck(xs[3], xs[4], xs[4], cfg.bottleneck_pool, cfg)

    def forward(self, image, check: bool = False) -> dict[str, torch.Tensor]:
        """Run all three paths; returns every named encoder tensor."""
        out: dict[str, torch.Tensor] = {"I": image}
        t = self.transformer(image)
        out.update({f"t_{i}": f for i, f in enumerate(t)})
        r = self.cnn(image) if self.use_r else (None,) * 4
        if self.use_r:
            out.update({f"r_{i}": f for i, f in enumerate(r)})
        x = self.stem(image)
        out["x_0"] = x
        for i, stage in enumerate(self.stages):
            try:
                x = stage(t[i], x, r[i])
            except (ShapeError, RuntimeError) as err:
                raise StageError(f"CoASMamba_{i + 1}: {err}") from err
            out[f"x_{i + 1}"] = x
        out["x_0_pooled"] = align_streams(out["x_0"], out["x_0"], out["x_1"].shape[-1])[0]
        try:
            x5, pre = self.bottleneck(out["x_3"], out["x_4"], return_pre_pool=True)
        except (ShapeError, RuntimeError) as err:
            raise StageError(f"CoAMamba_5: {err}") from err
        out["coamamba"], out["x_5"] = pre, x5
        if check:
            verify_shapes(out, self.cfg)
        return out


def verify_shapes(tensors: dict[str, torch.Tensor], cfg: ModelConfig) -> None:
    """Compare named tensors against the expected shape table; raise on mismatch or NaN/Inf."""
    table = shape_table(cfg)
    for name, f in tensors.items():
        if name not in table:
            continue
        if tuple(f.shape[1:]) != table[name]:
            raise StageError(f"{name}: got {tuple(f.shape[1:])}, expected {table[name]}")
        if f.device.type != "meta" and not torch.isfinite(f).all():
            raise StageError(f"{name}: non-finite values")


def dump_stats(tensors: dict[str, torch.Tensor], fh: IO[str]) -> None:
    """Write one JSON line of shape and min/max/mean/std per named tensor."""
    for name, f in tensors.items():
        f = f.detach().float()
        fh.write(json.dumps({"name": name, "shape": list(f.shape), "min": f.min().item(),
                             "max": f.max().item(), "mean": f.mean().item(), "std": f.std(unbiased=False).item()}) + "\n")
