import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from omnifuse.attention import CrossAttention, attend, record_attention
from omnifuse.errors import ParameterError, ShapeError
from omnifuse.fusion import (
    BidirectionalCrossAttention,
    CrossDimensionalEnhancer,
    DeformableSelfAttention,
    PatchEmbed,
    SpectralSelfAttention,
    bilinear_sample,
    first_queries,
    relevance_scores,
    select_queries,
    sinusoidal_grid,
    top_indices,
)


def _dense(q, k, v):
    return torch.softmax(q @ k.T / math.sqrt(k.shape[-1]), -1) @ v


def _set_linear(lin, weight, bias=None):
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(weight, dtype=lin.weight.dtype))
        lin.bias.copy_(torch.zeros_like(lin.bias) if bias is None else torch.as_tensor(bias, dtype=lin.bias.dtype))


# -- deformable -----------------------------------------------------------------------


def test_deformable_zero_offsets_sample_reference():
    torch.manual_seed(0)
    att = DeformableSelfAttention(8, n_heads=2, n_points=4).double()
    x = torch.randn(2, 4, 5, 8, dtype=torch.float64)
    # uniform weights over K points that all sit on the reference cell -> value projection
    torch.testing.assert_close(att.sample(x), att.value(x))
    torch.testing.assert_close(att(x), att.norm(x + att.out(att.value(x))))


def test_deformable_weights_normalized():
    torch.manual_seed(0)
    att = DeformableSelfAttention(8, 2, 4)
    torch.nn.init.normal_(att.weights.weight)
    with record_attention() as rec:
        att(torch.randn(1, 4, 4, 8))
    (w,) = [w for tag, w in rec if tag == "deformable"]
    assert torch.allclose(w.sum(-1), torch.ones(()), atol=1e-6)


def test_deformable_hand_offsets_bilinear_oracle():
    # one head, K=2, a 1-channel ramp v(y, x) = 10 y + x on a 3x4 grid
    att = DeformableSelfAttention(1, n_heads=1, n_points=2).double()
    _set_linear(att.value, [[1.0]])
    _set_linear(att.out, [[1.0]])
    # offsets (dy, dx): point 0 -> (0.5, 0), point 1 -> (0, -0.25); equal weights
    _set_linear(att.offsets, [[0.0]] * 4, [0.5, 0.0, 0.0, -0.25])
    ramp = torch.tensor([[10.0 * y + x for x in range(4)] for y in range(3)], dtype=torch.float64)
    x = ramp.view(1, 3, 4, 1)
    got = att.sample(x)[0, ..., 0].detach()

    def bilinear(grid, y, x):
        h, w = grid.shape
        y0, x0 = math.floor(y), math.floor(x)
        total = 0.0
        for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
            for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
                if 0 <= yy < h and 0 <= xx < w:
                    total += wy * wx * float(grid[yy, xx])
        return total

    for i in range(3):
        for j in range(4):
            expected = 0.5 * bilinear(ramp, i + 0.5, j) + 0.5 * bilinear(ramp, i, j - 0.25)
            assert abs(float(got[i, j]) - expected) < 1e-12


def test_bilinear_sample_zero_padding():
    v = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    out = bilinear_sample(v, torch.tensor([[[-1.0, -0.5]]], dtype=torch.float64), torch.tensor([[[0.0, 0.0]]], dtype=torch.float64))
    torch.testing.assert_close(out.flatten(), torch.tensor([0.0, 0.5], dtype=torch.float64))


def test_deformable_gradcheck_torch_route():
    torch.manual_seed(0)
    att = DeformableSelfAttention(4, 2, 2).double()
    torch.nn.init.normal_(att.offsets.weight, std=0.3)
    torch.nn.init.uniform_(att.offsets.bias, -0.7, 0.7)
    torch.nn.init.normal_(att.weights.weight)
    x = torch.randn(1, 3, 3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: att(t).sum(), (x,), eps=1e-6, atol=1e-6, rtol=1e-4)


# -- spectral self-attention ----------------------------------------------------------


def test_spectral_single_token():
    torch.manual_seed(0)
    blk = SpectralSelfAttention(4).double()
    x = torch.randn(2, 1, 4, dtype=torch.float64)
    v = blk.attn.to_v(blk.norm1(x))
    h = x + blk.attn.to_out(v)
    torch.testing.assert_close(blk(x), h + blk.mlp(blk.norm2(h)))


def test_spectral_permutation_equivariance():
    torch.manual_seed(0)
    blk = SpectralSelfAttention(8, 2).double()
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    perm = torch.randperm(6)
    torch.testing.assert_close(blk(x[:, perm]), blk(x)[:, perm])


def test_spectral_dense_oracle():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    k = torch.tensor([[0.5, 0.0], [1.0, -1.0], [0.0, 2.0]], dtype=torch.float64)
    v = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], dtype=torch.float64)
    logits = q @ k.T / math.sqrt(2)
    w = np.exp(logits.numpy())
    w /= w.sum(1, keepdims=True)
    torch.testing.assert_close(attend(q, k, v), torch.from_numpy(w @ v.numpy()))


# -- cross attention ------------------------------------------------------------------


def test_cross_single_key():
    torch.manual_seed(0)
    att = CrossAttention(3, 5).double()
    q = torch.randn(4, 3, dtype=torch.float64)
    kv = torch.randn(1, 5, dtype=torch.float64)
    expected = att.to_out(att.to_v(kv)).expand(4, 3)
    torch.testing.assert_close(att(q, kv), expected)


def test_cross_identical_queries():
    torch.manual_seed(0)
    att = CrossAttention(3, 5, n_heads=1).double()
    out = att(torch.ones(4, 3, dtype=torch.float64), torch.randn(6, 5, dtype=torch.float64))
    assert torch.allclose(out, out[:1].expand_as(out))


def test_cross_hand_set_2x2():
    att = CrossAttention(2, 2).double()
    for lin in (att.to_q, att.to_k, att.to_v, att.to_out):
        _set_linear(lin, torch.eye(2))
    q = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    kv = torch.tensor([[1.0, 1.0], [0.0, -1.0]], dtype=torch.float64)
    # sqrt(d_kv) = sqrt(2)
    l00, l01 = 1 / math.sqrt(2), 0.0
    l10, l11 = 2 / math.sqrt(2), -2 / math.sqrt(2)
    r0 = np.exp([l00, l01]) / np.exp([l00, l01]).sum()
    r1 = np.exp([l10, l11]) / np.exp([l10, l11]).sum()
    expected = np.stack([r0 @ kv.numpy(), r1 @ kv.numpy()])
    np.testing.assert_allclose(att(q, kv).detach().numpy(), expected, atol=1e-12)


# -- enhance ---------------------------------------------------------------------


def test_enhance_shapes():
    torch.manual_seed(0)
    enh = CrossDimensionalEnhancer(16, 8, n_layers=2, n_heads=2)
    spa, spec = enh(torch.randn(2, 20, 16), torch.randn(2, 5, 8))
    assert spa.shape == (2, 20, 16) and spec.shape == (2, 5, 8)


def test_enhance_zero_out_is_identity():
    enh = CrossDimensionalEnhancer(16, 8, 2, 2)
    for layer in enh.layers:
        for att in (layer.spa_from_spec, layer.spec_from_spa):
            torch.nn.init.zeros_(att.to_out.weight)
    spa, spec = torch.randn(1, 10, 16), torch.randn(1, 4, 8)
    a, b = enh(spa, spec)
    assert torch.equal(a, spa) and torch.equal(b, spec)


def test_enhance_simultaneous_update_oracle():
    torch.manual_seed(2)
    layer = BidirectionalCrossAttention(3, 2).double()
    spa = torch.randn(2, 3, dtype=torch.float64)
    spec = torch.randn(2, 2, dtype=torch.float64)
    ns = torch.nn.functional.layer_norm(spa, (3,), layer.norm_spa.weight, layer.norm_spa.bias)
    np_ = torch.nn.functional.layer_norm(spec, (2,), layer.norm_spec.weight, layer.norm_spec.bias)

    def oracle(att, x, ctx):
        q, k, v = att.to_q(x), att.to_k(ctx), att.to_v(ctx)
        return att.to_out(_dense(q, k, v))

    new_spa, new_spec = layer(spa, spec)
    torch.testing.assert_close(new_spa, spa + oracle(layer.spa_from_spec, ns, np_))
    torch.testing.assert_close(new_spec, spec + oracle(layer.spec_from_spa, np_, ns))


def test_enhance_swap_symmetry():
    torch.manual_seed(0)
    ab = BidirectionalCrossAttention(6, 6, 2).double()
    ba = BidirectionalCrossAttention(6, 6, 2).double()
    with torch.no_grad():
        ba.norm_spa.load_state_dict(ab.norm_spec.state_dict())
        ba.norm_spec.load_state_dict(ab.norm_spa.state_dict())
        ba.spa_from_spec.load_state_dict(ab.spec_from_spa.state_dict())
        ba.spec_from_spa.load_state_dict(ab.spa_from_spec.state_dict())
    x, y = torch.randn(1, 5, 6, dtype=torch.float64), torch.randn(1, 3, 6, dtype=torch.float64)
    a1, b1 = ab(x, y)
    b2, a2 = ba(y, x)
    torch.testing.assert_close(a1, a2, rtol=0, atol=0)
    torch.testing.assert_close(b1, b2, rtol=0, atol=0)


def test_enhance_rows_normalized():
    torch.manual_seed(0)
    enh = CrossDimensionalEnhancer(8, 4, 2, 2)
    with record_attention() as rec:
        enh(torch.randn(2, 12, 8), torch.randn(2, 5, 4))
    assert len(rec) == 4
    for _, w in rec:
        assert torch.allclose(w.sum(-1), torch.ones(()), atol=1e-6)


# -- patch embedding -------------------------------------------------------------


def test_patch_count():
    pe = PatchEmbed(4, 3, 8)
    spa, spec = pe(torch.randn(1, 16, 16, 4), torch.randn(1, 7, 3))
    assert spa.shape == (1, 64, 8) and spec.shape == (1, 7, 8)


def test_patch_odd_grid():
    with pytest.raises(ShapeError):
        PatchEmbed(4, 3, 8)(torch.randn(1, 5, 4, 4), torch.randn(1, 2, 3))


def test_patch_identity_concatenation():
    pe = PatchEmbed(2, 2, 8, position=False).double()
    _set_linear(pe.spa, torch.eye(8))
    grid = torch.arange(4 * 4 * 2, dtype=torch.float64).view(1, 4, 4, 2)
    spa, _ = pe(grid, torch.zeros(1, 1, 2, dtype=torch.float64))
    g = grid[0]
    for pi in range(2):
        for pj in range(2):
            cells = [g[2 * pi + a, 2 * pj + b] for a in (0, 1) for b in (0, 1)]
            torch.testing.assert_close(spa[0, pi * 2 + pj], torch.cat(cells))


def test_sinusoidal_grid_fixed():
    enc = sinusoidal_grid(2, 3, 8)
    assert enc.shape == (6, 8)
    assert torch.equal(enc, sinusoidal_grid(2, 3, 8))
    torch.testing.assert_close(enc[0], torch.tensor([0.0, 0.0, 1.0, 1.0] * 2))


# -- query selection -------------------------------------------------------------


def test_select_full_set_preserves_order():
    t = torch.randn(1, 6, 4)
    qs = select_queries(t, torch.randn(1, 3, 4), 6)
    assert qs.source_indices.tolist() == [list(range(6))]
    assert torch.equal(qs.tokens, t)


def test_select_hand_example():
    t_spa = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]])
    t_spec = torch.tensor([[[1.0, 0.0]]])
    assert relevance_scores(t_spa, t_spec).tolist() == [[1.0, 0.0, 1.0]]
    assert select_queries(t_spa, t_spec, 2).source_indices.tolist() == [[0, 2]]


def test_select_ties_lower_index():
    assert top_indices(torch.zeros(1, 5), 2).tolist() == [[0, 1]]


def test_select_range_errors():
    with pytest.raises(ParameterError):
        select_queries(torch.randn(1, 4, 2), torch.randn(1, 1, 2), 5)
    with pytest.raises(ParameterError):
        select_queries(torch.randn(1, 4, 2), torch.randn(1, 1, 2), 0)
    with pytest.raises(ParameterError):
        first_queries(torch.randn(1, 4, 2), 5)


def test_select_gradient_reaches_selected_only():
    t_spa = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]], requires_grad=True)
    t_spec = torch.tensor([[[1.0, 0.0]]], requires_grad=True)
    qs = select_queries(t_spa, t_spec, 2)
    qs.tokens.sum().backward()
    assert t_spa.grad[0, 1].abs().sum() == 0 and t_spa.grad[0, [0, 2]].abs().min() == 1
    assert t_spec.grad is None


def _oracle(scores, n_q):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:n_q])


@settings(max_examples=200)
@given(
    n_spa=st.integers(1, 64),
    n_spec=st.integers(1, 16),
    seed=st.integers(0, 2**31 - 1),
    coarse=st.booleans(),
    data=st.data(),
)
def test_select_matches_oracle_property(n_spa, n_spec, seed, coarse, data):
    g = torch.Generator().manual_seed(seed)
    d = 3
    if coarse:  # small integers make ties common
        t_spa = torch.randint(-2, 3, (1, n_spa, d), generator=g).double()
        t_spec = torch.randint(-2, 3, (1, n_spec, d), generator=g).double()
    else:
        t_spa, t_spec = torch.randn(1, n_spa, d, generator=g, dtype=torch.float64), torch.randn(1, n_spec, d, generator=g, dtype=torch.float64)
    n_q = data.draw(st.integers(1, n_spa))
    scores = [max(float(t_spa[0, i] @ t_spec[0, j]) for j in range(n_spec)) for i in range(n_spa)]
    idx = select_queries(t_spa, t_spec, n_q).source_indices[0].tolist()
    assert idx == _oracle(scores, n_q)
    # strictly increasing monotone transforms keep the selected set
    assert top_indices(torch.tensor([scores]).exp() * 3 + 1, n_q)[0].tolist() == idx
