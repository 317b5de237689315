import pytest
import torch
import torch.nn.functional as F

from mambacafu.attention import (AlignmentPolicy, AttentionGate, ChannelAttention, CoAttentionGate, Concat,
                                 ShapeError, SpatialAttention, align_streams, co_attention_gate_star)


def _bn(x, bn):
    # eval-mode batch norm as an explicit affine map
    scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
    return (x - bn.running_mean[None, :, None, None]) * scale[None, :, None, None] + bn.bias[None, :, None, None]


def _randomise(module, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, buf in module.named_buffers():
            if name.endswith("running_mean"):
                buf.copy_(torch.randn(buf.shape, generator=gen) * 0.1)
            elif name.endswith("running_var"):
                buf.copy_(torch.rand(buf.shape, generator=gen) + 0.5)
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 0.1)
    return module.eval()


def test_attention_gate_matches_formula():
    torch.manual_seed(0)
    ag = _randomise(AttentionGate(4, 6, 8), 1)
    g, x = torch.randn(2, 4, 5, 5), torch.randn(2, 6, 5, 5)
    q = F.relu(_bn(F.conv2d(x, ag.W_x[0].weight, ag.W_x[0].bias), ag.W_x[1])
               + _bn(F.conv2d(g, ag.W_g[0].weight, ag.W_g[0].bias), ag.W_g[1]))
    alpha = torch.sigmoid(_bn(F.conv2d(q, ag.psi[0].weight, ag.psi[0].bias), ag.psi[1]))
    with torch.no_grad():
        assert torch.allclose(ag.coefficients(g, x), alpha, atol=1e-6)
        assert torch.allclose(ag(g, x), x * alpha, atol=1e-6)
    assert alpha.shape == (2, 1, 5, 5)
    assert ((alpha > 0) & (alpha < 1)).all()


def test_attention_gate_rejects_misaligned_inputs():
    ag = AttentionGate(4, 4, 8)
    with pytest.raises(ShapeError):
        ag(torch.randn(1, 4, 8, 8), torch.randn(1, 4, 4, 4))


def test_spatial_attention_matches_formula():
    torch.manual_seed(0)
    sa = SpatialAttention(7).eval()
    f = torch.randn(2, 5, 9, 9)
    pooled = torch.stack([f.max(1).values, f.mean(1)], 1)
    gate = torch.sigmoid(F.conv2d(pooled, sa.conv.weight, padding=3))
    with torch.no_grad():
        assert torch.allclose(sa(f), f * gate, atol=1e-6)


def test_channel_attention_matches_formula():
    torch.manual_seed(0)
    ca = ChannelAttention(8, 4)
    f = torch.randn(2, 8, 3, 3)
    s = f.mean((2, 3))
    w = torch.sigmoid(ca.fc2(F.relu(ca.fc1(s))))
    with torch.no_grad():
        assert torch.allclose(ca(f), f * w[:, :, None, None], atol=1e-6)


def test_channel_attention_needs_divisible_width():
    with pytest.raises(ValueError):
        ChannelAttention(12, 16)
    with pytest.raises(ValueError):
        ChannelAttention(20, 16)


def test_coag_concatenates_then_reweights():
    torch.manual_seed(0)
    coag = _randomise(CoAttentionGate(4, 6, 8, reduction=2), 2)
    a, b = torch.randn(2, 4, 6, 6), torch.randn(2, 6, 6, 6)
    with torch.no_grad():
        expected = coag.ca(torch.cat([coag.ag_1(a, b), coag.ag_2(b, a)], 1))
        out = coag(a, b)
    assert out.shape == (2, 10, 6, 6)
    assert torch.allclose(out, expected)


def test_coag_star_swap_symmetry():
    torch.manual_seed(0)
    g = _randomise(co_attention_gate_star(4, 4, 8), 3)
    g.ag_2.load_state_dict(g.ag_1.state_dict())
    a, b = torch.randn(1, 4, 5, 5), torch.randn(1, 4, 5, 5)
    with torch.no_grad():
        ab, ba = g(a, b), g(b, a)
    assert torch.allclose(ab, torch.cat([ba[:, 4:], ba[:, :4]], 1))


def test_coag_output_at_requested_resolution():
    coag = CoAttentionGate(4, 4, 8, reduction=4)
    out = coag(torch.randn(1, 4, 16, 16), torch.randn(1, 4, 4, 4), size=8)
    assert out.shape == (1, 8, 8, 8)


def test_align_streams_policies():
    f = torch.arange(16.0).reshape(1, 1, 4, 4)
    down, up = align_streams(f, f, 2)
    assert torch.equal(down, F.max_pool2d(f, 2))
    _, up = align_streams(f, torch.ones(1, 3, 2, 2), 4)
    assert up.shape == (1, 3, 4, 4) and torch.allclose(up, torch.ones_like(up))
    avg, _ = align_streams(f, f, 2, AlignmentPolicy(down="avg"))
    assert torch.equal(avg, F.avg_pool2d(f, 2))


@pytest.mark.parametrize("src,dst", [(6, 4), (12, 4), (8, 3)])
def test_align_streams_rejects_non_power_of_two(src, dst):
    with pytest.raises(ShapeError):
        align_streams(torch.randn(1, 1, src, src), torch.randn(1, 1, dst, dst), dst)


def test_concat_fallback():
    out = Concat()(torch.randn(1, 3, 8, 8), torch.randn(1, 5, 4, 4))
    assert out.shape == (1, 8, 8, 8)
