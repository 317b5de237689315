import io
import json

import pytest
import torch

from mambacafu.attention import AttentionGate, CoAttentionGate, ShapeError
from mambacafu.complexity import (_module_macs, count_parameters, count_parameters_by_tensor,
                                  count_params_flops)
from mambacafu.config import TABLE6, TABLE7, AblationFlags, ModelConfig, shape_table
from mambacafu.encoder import Encoder, StageError, dump_stats
from mambacafu.losses import combined_loss
from mambacafu.model import DoubleLCoA, MambaCAFU
from mambacafu.ssm import MambaConv, SelectiveScan1d

VARIANTS = [*(("table6", n, f) for n, f in TABLE6.items()), *(("table7", n, f) for n, f in TABLE7.items())]


@pytest.mark.parametrize("variant", ["V0", "V1"])
def test_tiny_forward_matches_shape_table(variant):
    cfg = ModelConfig.tiny_config(3, 64, variant=variant)
    torch.manual_seed(0)
    feats = MambaCAFU(cfg).eval().forward_features(torch.randn(2, 3, 64, 64), check=True)
    table = shape_table(cfg)
    assert set(table) <= set(feats)
    for name, shape in table.items():
        assert tuple(feats[name].shape[1:]) == shape, name
    assert feats["logits"].shape == (2, 3, 64, 64)


@pytest.mark.parametrize("table,name,flags", VARIANTS, ids=[f"{t}:{n}" for t, n, _ in VARIANTS])
def test_ablation_variant_forward_backward(table, name, flags):
    torch.manual_seed(0)
    model = MambaCAFU(ModelConfig.tiny_config(3, ablation=flags))
    logits = model(torch.randn(2, 3, 64, 64))
    combined_loss(logits, torch.randint(0, 3, (2, 64, 64)), 0.6).backward()
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in model.parameters())


def _count(model, kind):
    return sum(isinstance(m, kind) for m in model.modules())


def test_flags_remove_blocks():
    full = MambaCAFU(ModelConfig.tiny_config(3))
    assert _count(full, MambaConv) == 5 and _count(full, CoAttentionGate) == 13
    no_mamba = MambaCAFU(ModelConfig.tiny_config(3, ablation=AblationFlags(use_mambaconv=False)))
    assert _count(no_mamba, MambaConv) == 0
    no_coag = MambaCAFU(ModelConfig.tiny_config(3, ablation=AblationFlags(use_coag=False)))
    assert _count(no_coag, CoAttentionGate) == 0
    no_r = MambaCAFU(ModelConfig.tiny_config(3, ablation=AblationFlags(use_resnet_branch=False)))
    assert no_r.encoder.cnn is None
    base7 = MambaCAFU(ModelConfig.tiny_config(3, ablation=TABLE7["Baseline"]))
    assert _count(base7, MambaConv) == 0 and _count(base7, AttentionGate) == 0


def test_decoder_rejects_misaligned_stream():
    block = DoubleLCoA(4, 8, 8, 4, ModelConfig.tiny_config(3))
    with pytest.raises(ShapeError):
        block(torch.randn(1, 4, 8, 8), torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4))


def test_stage_errors_name_the_stage():
    cfg = ModelConfig.tiny_config(3)
    model = MambaCAFU(cfg)
    model.encoder.stages[2].fuse.ag_1.W_g[0] = torch.nn.Conv2d(5, 8, 1)  # wrong input width
    with pytest.raises(StageError, match="CoASMamba_3"):
        model(torch.randn(1, 3, 64, 64))


def test_input_size_mismatch_is_reported():
    model = MambaCAFU(ModelConfig.tiny_config(3))
    with pytest.raises(StageError):
        model.forward_features(torch.randn(1, 3, 96, 96), check=True)


def test_dump_stats_jsonl():
    torch.manual_seed(0)
    with torch.no_grad():
        feats = Encoder(ModelConfig.tiny_config(3)).eval()(torch.randn(1, 3, 64, 64))
    buf = io.StringIO()
    dump_stats(feats, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["name"] for r in rows] == list(feats)
    for r in rows:
        f = feats[r["name"]]
        assert r["shape"] == list(f.shape)
        assert r["min"] == pytest.approx(f.min().item()) and r["max"] == pytest.approx(f.max().item())


def test_tiny_param_count_matches_traversal_oracle():
    cfg = ModelConfig.tiny_config(3)
    model = MambaCAFU(cfg)
    assert count_parameters(model) == count_parameters_by_tensor(model)
    c = count_params_flops(cfg)
    assert c.params == count_parameters(model)
    assert sum(c.params_by_block.values()) == c.params
    assert sum(c.macs_by_block.values()) == c.macs


def test_count_is_side_effect_free():
    state = torch.get_rng_state()
    a = count_params_flops(ModelConfig.tiny_config(3))
    assert torch.equal(state, torch.get_rng_state())
    b = count_params_flops(ModelConfig.tiny_config(3))
    assert (a.params, a.macs) == (b.params, b.macs)


def test_mac_formulas():
    conv = torch.nn.Conv2d(3, 8, 3, padding=1, groups=1)
    out = conv(torch.randn(1, 3, 10, 10))
    assert _module_macs(conv, None, out) == 8 * 100 * 3 * 9 + 8 * 100
    lin = torch.nn.Linear(5, 7, bias=False)
    assert _module_macs(lin, None, lin(torch.randn(4, 5))) == 4 * 7 * 5
    scan = SelectiveScan1d(6, 4)
    assert _module_macs(scan, (torch.randn(2, 10, 6),), None) == 2 * 10 * 6 * (4 * 4 + 1)


def test_complexity_table_lists_blocks():
    text = count_params_flops(ModelConfig.tiny_config(3)).table()
    assert "encoder.stages.0" in text and "decoder.3" in text and text.splitlines()[-1].startswith("total")
