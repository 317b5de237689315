"""Co-attention decoder, segmentation head and the full network."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import Concat, ShapeError, co_attention_gate_star, f_int_for
from .config import ModelConfig, check_config
from .encoder import Encoder, StageError, verify_shapes
from .ssm import DoubleConvBlock


class Upsample(nn.Module):
    """Bilinear x2 upsampling."""

    def __init__(self, scale: int = 2):
        super().__init__()
        self.scale = scale

    def forward(self, f):
        return F.interpolate(f, scale_factor=self.scale, mode="bilinear", align_corners=False)


def upsample(f, scale: int = 2):
    return F.interpolate(f, scale_factor=scale, mode="bilinear", align_corners=False)


class DoubleLCoA(nn.Module):
    """Fuse two encoder skips, then the decoder stream, then refine with DConvB.

    ``s = CoAG*(skip_lo, skip_hi)``; ``out = DConvB(CoAG*(s, d))``. The output has
    skip_lo's resolution. Without co-attention the gates become concatenation.
    """

    def __init__(self, c_lo: int, c_hi: int, c_d: int, c_out: int, cfg: ModelConfig):
        super().__init__()
        flags = cfg.ablation
        gated = flags.use_doublelcoa and flags.use_coag
        f_int = f_int_for(c_out)
        if gated:
            self.skip_gate = co_attention_gate_star(c_lo, c_hi, f_int)
            self.dec_gate = co_attention_gate_star(c_d, c_lo + c_hi, f_int)
        else:
            self.skip_gate = Concat()
            self.dec_gate = Concat()
        self.dconvb = DoubleConvBlock(c_lo + c_hi + c_d, c_out)

    def forward(self, skip_lo, skip_hi, d):
        size = skip_lo.shape[-1]
        if d.shape[-1] != size:
            raise ShapeError(f"decoder stream at {d.shape[-1]} but skip at {size}")
        try:
            s = self.skip_gate(skip_lo, skip_hi, size)
        except ShapeError as err:
            raise ShapeError(f"skip CoAG*: {err}") from err
        try:
            # decoder stream gates the fused skips in the first AG
            u = self.dec_gate(d, s, size)
        except ShapeError as err:
            raise ShapeError(f"decoder CoAG*: {err}") from err
        return self.dconvb(u)


class SegmentationHead(nn.Conv2d):
    """1x1 convolution to class logits (no activation)."""

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__(in_ch, num_classes, 1)


class MambaCAFU(nn.Module):
    """Hybrid CNN-Transformer-Mamba encoder with a co-attention decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = check_config(cfg)
        self.encoder = Encoder(cfg)
        xs = (cfg.stem_channels, *cfg.stage_channels)
        self.up = Upsample(2)
        # block k fuses x_{3-k} (lo) with x_{4-k} (hi) and the upsampled stream
        self.decoder = nn.ModuleList(
            DoubleLCoA(xs[3 - k], xs[4 - k], xs[4 - k], xs[3 - k], cfg) for k in range(4))
        self.head = SegmentationHead(cfg.stem_channels, cfg.num_classes)

    def forward_features(self, image, check: bool = False) -> dict[str, torch.Tensor]:
        feats = self.encoder(image)
        d = feats["x_5"]
        for k, block in enumerate(self.decoder):
            d = self.up(d)
            feats[f"d_{4 - k}"] = d
            try:
                d = block(feats[f"x_{3 - k}"], feats[f"x_{4 - k}"], d)
            except (ShapeError, RuntimeError) as err:
                raise StageError(f"DoubleLCoA_{k + 1}: {err}") from err
            feats["d_0" if k == 3 else f"dlcoa_{k + 1}"] = d
        feats["logits"] = self.head(d)
        if check:
            verify_shapes(feats, self.cfg)
        return feats

    def forward(self, image):
        return self.forward_features(image)["logits"]
