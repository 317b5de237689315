"""Parameter and multiply-accumulate counts.

MACs are counted analytically per op from the shapes seen during a forward
pass on the ``meta`` device (no data, no compute):

* convolution: ``out_elems * in_ch/groups * kh * kw`` (+ ``out_elems`` for bias)
* linear: ``out_elems * in_features`` (+ ``out_elems`` for bias)
* attention: ``2 * heads * N_q * N_kv * head_dim`` for the two matrix products
* selective scan: ``4 * L * ch * N`` (decay, input drive, state update, readout) + ``L * ch``

Norms, activations, pooling and interpolation are not counted.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbones import SRAttention
from .config import ModelConfig, check_config
from .ssm import SelectiveScan1d


@dataclass
class Complexity:
    params: int
    macs: int
    params_by_block: dict[str, int] = field(default_factory=dict)
    macs_by_block: dict[str, int] = field(default_factory=dict)

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    def table(self) -> str:
        rows = [f"{'block':<28}{'params (M)':>12}{'GMac':>10}"]
        for name in self.params_by_block:
            rows.append(f"{name:<28}{self.params_by_block[name] / 1e6:>12.3f}"
                        f"{self.macs_by_block.get(name, 0) / 1e9:>10.3f}")
        rows.append(f"{'total':<28}{self.params_m:>12.3f}{self.gmacs:>10.3f}")
        return "\n".join(rows)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def count_parameters_by_tensor(module: nn.Module) -> int:
    """Independent count via the state dict (buffers excluded)."""
    buffers = {name for name, _ in module.named_buffers()}
    total = 0
    for name, t in module.state_dict().items():
        if name not in buffers:
            n = 1
            for s in t.shape:
                n *= s
            total += n
    return total


def _module_macs(m: nn.Module, inputs, output) -> int:
    if isinstance(m, nn.Conv2d):
        kh, kw = m.kernel_size
        n = output.numel() * (m.in_channels // m.groups) * kh * kw
        return n + (output.numel() if m.bias is not None else 0)
    if isinstance(m, nn.Linear):
        n = output.numel() * m.in_features
        return n + (output.numel() if m.bias is not None else 0)
    if isinstance(m, SRAttention):
        x, h, w = inputs
        b, n_q, c = x.shape
        return 2 * b * n_q * m.kv_tokens(h, w) * c
    if isinstance(m, SelectiveScan1d):
        b, length, ch = inputs[0].shape
        return b * length * ch * (4 * m.state_dim + 1)
    return 0


def block_names(model: nn.Module) -> dict[nn.Module, str]:
    """Map every submodule to a reporting block such as ``encoder.stages.2``."""
    names = {}
    for name, mod in model.named_modules():
        parts = name.split(".")
        if parts[0] == "encoder" and len(parts) > 1:
            key = ".".join(parts[:3] if parts[1] == "stages" else parts[:2])
        elif parts[0] == "decoder" and len(parts) > 1:
            key = ".".join(parts[:2])
        else:
            key = parts[0] or "model"
        names[mod] = key
    return names


def count_params_flops(cfg: ModelConfig, batch: int = 1) -> Complexity:
    """Exact trainable-parameter count and analytic MACs for one forward pass."""
    from .model import MambaCAFU

    check_config(cfg)
    with torch.device("meta"):
        model = MambaCAFU(cfg)
    model.eval()
    owner = block_names(model)
    macs: dict[str, int] = defaultdict(int)
    hooks = []
    for mod in model.modules():
        def hook(m, inputs, output, key=owner[mod]):
            macs[key] += _module_macs(m, inputs, output)
        hooks.append(mod.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(torch.empty(batch, cfg.in_channels, cfg.input_size, cfg.input_size, device="meta"))
    finally:
        for h in hooks:
            h.remove()
    params_by_block: dict[str, int] = defaultdict(int)
    for name, p in model.named_parameters():
        parts = name.split(".")
        mod = model.get_submodule(".".join(parts[:-1])) if len(parts) > 1 else model
        if p.requires_grad:
            params_by_block[owner[mod]] += p.numel()
    blocks = {k: params_by_block[k] for k in sorted(set(params_by_block) | set(macs))
              if params_by_block[k] or macs.get(k)}
    return Complexity(
        params=count_parameters(model),
        macs=sum(macs.values()),
        params_by_block=blocks,
        macs_by_block={k: macs.get(k, 0) for k in blocks},
    )
