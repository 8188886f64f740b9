import numpy as np
import pytest
import torch

from flow4d.decoders import OccupancyDecoder, TemporalDecoder, occupancy_decode
from flow4d.encoders import SpatialEncoder, TemporalEncoder
from flow4d.fusion import CrossAttention, Fusion
from flow4d.model import JointModel, reverse_spatial, reverse_time
from oracles import FD_RTOL, attention_by_hand, check_gradients


def _seq(B=2, T=3, N=20, seed=0):
    g = torch.Generator().manual_seed(seed)
    pts = torch.rand(B, T, N, 3, generator=g) - 0.5
    times = torch.linspace(0, 1, T).expand(B, T).clone()
    return pts, times


# --- encoders ---------------------------------------------------------------

def test_spatial_encoder_is_permutation_invariant_and_duplicate_invariant():
    torch.manual_seed(0)
    enc = SpatialEncoder(16, 3)
    pts = torch.rand(4, 30, 3) - 0.5
    tokens, code = enc(pts)
    perm = torch.randperm(30)
    tokens_p, code_p = enc(pts[:, perm])
    assert torch.allclose(code, code_p, atol=1e-6)
    assert torch.allclose(tokens[:, perm], tokens_p, atol=1e-6)
    _, code_dup = enc(torch.cat([pts, pts[:, :5]], dim=1))
    assert torch.allclose(code, code_dup, atol=1e-6)


def test_spatial_encoder_errors_and_shapes():
    enc = SpatialEncoder(8, 2)
    with pytest.raises(ValueError, match="at least 2 points"):
        enc(torch.zeros(3, 1, 3))
    tokens, code = enc(torch.rand(2, 5, 7, 3))
    assert tokens.shape == (2, 5, 7, 8) and code.shape == (2, 5, 8)


def test_temporal_encoder_sees_time_order():
    torch.manual_seed(0)
    enc = TemporalEncoder(16, 3)
    pts, times = _seq(B=1, T=4)
    tokens, h = enc(pts, times)
    assert tokens.shape == (1, 4, 16) and h.shape == (1, 16)
    _, h_rev = enc(*reverse_time(pts, times))
    assert not torch.allclose(h, h_rev)
    assert enc.calls == 2


def test_temporal_encoder_errors():
    enc = TemporalEncoder(8, 1)
    pts, times = _seq(B=1, T=3)
    with pytest.raises(ValueError, match="2 frames"):
        enc(pts[:, :1], times[:, :1])
    with pytest.raises(ValueError, match="increasing"):
        enc(pts, torch.tensor([[0.0, 0.5, 0.5]]))


# --- fusion -----------------------------------------------------------------

def _identity_attention(dim):
    attn = CrossAttention(dim, dim, dim, prenorm=False)
    with torch.no_grad():
        for fc in (attn.to_q, attn.to_k, attn.to_v):
            fc.weight.copy_(torch.eye(dim))
    return attn


def test_attention_matches_hand_computation():
    attn = _identity_attention(3).double()
    q = torch.tensor([[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]], dtype=torch.float64)
    kv = torch.tensor([[0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [-1.0, 0.0, 2.0]], dtype=torch.float64)
    out, w = attn(q, kv, kv)
    ref_out, ref_w = attention_by_hand(q, kv, kv)
    assert np.allclose(out.detach().numpy(), ref_out, atol=1e-12)
    assert np.allclose(w.detach().numpy(), ref_w, atol=1e-12)


def test_attention_rows_sum_to_one_and_single_key_copies_value():
    torch.manual_seed(0)
    attn = CrossAttention(8, 6, 4, heads=2)
    q, kv = torch.randn(5, 7, 8), torch.randn(5, 3, 6)
    _, w = attn(q, kv, kv)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))
    out, w1 = attn(q, kv[:, :1], kv[:, :1])
    assert torch.allclose(w1, torch.ones_like(w1))
    assert torch.allclose(out, attn.to_v(attn.norm_kv(kv[:, :1])).expand_as(out), atol=1e-6)
    with pytest.raises(ValueError, match="at least one key"):
        attn(q, kv[:, :0], kv[:, :0])


def test_attention_is_linear_in_values_when_keys_are_fixed():
    torch.manual_seed(1)
    attn = CrossAttention(4, 4, 4, prenorm=False)
    q, k, v = torch.randn(6, 4), torch.randn(5, 4), torch.randn(5, 4)
    out, _ = attn(q, k, v)
    out3, _ = attn(q, k, 3.0 * v)
    assert torch.allclose(out3, 3.0 * out, atol=1e-5)


def test_sca_with_uniform_temporal_tokens_adds_a_constant():
    torch.manual_seed(0)
    fusion = Fusion(8, "single_cross_attn")
    tokens = torch.randn(2, 10, 8)
    frame = torch.randn(2, 1, 8).expand(2, 4, 8)
    out, _ = fusion.sca_tokens(tokens, frame)
    shift = out - tokens
    assert torch.allclose(shift, shift[:, :1].expand_as(shift), atol=1e-6)


def test_tca_returns_one_vector_per_frame():
    torch.manual_seed(0)
    fusion = Fusion(8, "dual_cross_attn")
    S, h = torch.randn(3, 8), torch.randn(3, 8)
    tok = torch.randn(3, 1, 8)
    out, w = fusion.tca_code(S, h, tok)
    assert out.shape == (3, 8) and torch.allclose(w, torch.ones_like(w))
    assert torch.allclose(out, fusion.tca.to_v(fusion.tca.norm_kv(tok)).squeeze(1), atol=1e-6)


@pytest.mark.parametrize("mode", ["concat", "single_cross_attn", "dual_cross_attn"])
def test_fusion_modes_shapes(mode):
    torch.manual_seed(0)
    fusion = Fusion(8, mode)
    fused = fusion(torch.randn(3, 8), torch.randn(3, 8), torch.randn(3, 11, 8), torch.randn(3, 4, 8))
    assert fused.e.shape == (3, 8)
    assert ("tca" in fused.diagnostics) == (mode == "dual_cross_attn")


def test_dual_mode_is_pooled_sca_plus_tca():
    torch.manual_seed(0)
    fusion = Fusion(8, "dual_cross_attn")
    S, h, st, tt = torch.randn(3, 8), torch.randn(3, 8), torch.randn(3, 11, 8), torch.randn(3, 4, 8)
    tokens, _ = fusion.sca_tokens(st, tt)
    tca, _ = fusion.tca_code(S, h, tokens)
    assert torch.allclose(fusion(S, h, st, tt).e, tokens.max(1).values + tca)


def test_concat_fusion_with_zero_temporal_code_ignores_the_temporal_half():
    torch.manual_seed(0)
    fusion = Fusion(4, "concat")
    S = torch.randn(5, 4)
    expected = S @ fusion.proj.weight[:, :4].T + fusion.proj.bias
    assert torch.allclose(fusion(S, torch.zeros(5, 4)).e, expected, atol=1e-6)


def test_fusion_errors():
    with pytest.raises(ValueError, match="unknown fusion mode"):
        Fusion(8, "sideways")
    with pytest.raises(ValueError, match="channels"):
        Fusion(8, "concat")(torch.zeros(1, 7), torch.zeros(1, 7))
    with pytest.raises(ValueError, match="non-empty"):
        Fusion(8, "single_cross_attn").sca_tokens(torch.zeros(1, 0, 8), torch.zeros(1, 2, 8))


# --- decoders ---------------------------------------------------------------

def test_temporal_decoder_starts_at_zero_flow_and_is_point_equivariant():
    torch.manual_seed(0)
    dec = TemporalDecoder(8, 16, 2)
    pts, e_ref, e_t = torch.rand(2, 9, 3), torch.randn(2, 8), torch.randn(2, 8)
    V, f = dec(pts, e_ref, e_t)
    assert torch.equal(V, torch.zeros_like(V)) and f.shape == (2, 9, 16)
    torch.nn.init.normal_(dec.fc_out.weight)
    V, _ = dec(pts, e_ref, e_t)
    perm = torch.randperm(9)
    assert torch.allclose(dec(pts[:, perm], e_ref, e_t)[0], V[:, perm], atol=1e-6)
    with pytest.raises(ValueError):
        dec(pts, torch.randn(2, 7), e_t)


def test_occupancy_decoder_starts_at_one_half():
    torch.manual_seed(0)
    dec = OccupancyDecoder(8, 16, 2)
    p = occupancy_decode(dec, torch.rand(2, 30, 3), torch.randn(2, 8), torch.randn(2, 16), mode="train")
    assert p.shape == (2, 30) and torch.allclose(p, torch.full_like(p, 0.5))
    with pytest.raises(ValueError):
        dec(torch.rand(2, 0, 3), torch.randn(2, 8), torch.randn(2, 16))


def test_occupancy_eval_mode_has_no_batch_coupling():
    torch.manual_seed(0)
    dec = OccupancyDecoder(4, 8, 1)
    torch.nn.init.normal_(dec.fc_out.weight)
    q, e, f = torch.rand(2, 25, 3), torch.randn(2, 4), torch.randn(2, 8)
    dec(q, e, f, "train")  # move the running statistics off their initial values
    both = dec(q, e, f, "eval")
    assert torch.allclose(both[1:], dec(q[1:], e[1:], f[1:], "eval"), atol=1e-6)
    assert torch.allclose(both[:, :3], dec(q[:, :3], e, f, "eval"), atol=1e-6)
    # train mode shares one set of statistics across the whole batch
    assert not torch.allclose(dec(q, e, f, "train")[1:], dec(q[1:], e[1:], f[1:], "train"), atol=1e-3)


def test_decoder_gradients_match_central_differences():
    torch.manual_seed(3)
    rng = np.random.default_rng(3)
    tdec = TemporalDecoder(4, 6, 1).double()
    odec = OccupancyDecoder(4, 6, 1).double()
    for m in (tdec.fc_out, odec.fc_out):
        torch.nn.init.normal_(m.weight)
    pts = torch.rand(2, 5, 3, dtype=torch.float64, requires_grad=True)
    e = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    q = torch.rand(2, 7, 3, dtype=torch.float64, requires_grad=True)

    def f():
        V, feat = tdec(pts, e[:1].expand(2, 4), e)
        return V.pow(2).sum() + odec(q, e, feat.max(1).values, "train").sin().sum()

    assert check_gradients(f, [pts, e, q] + list(tdec.parameters()) + list(odec.parameters()), rng) <= FD_RTOL


def test_fusion_and_encoder_gradients_match_central_differences():
    torch.manual_seed(4)
    rng = np.random.default_rng(4)
    model = JointModel(width=4, hidden=4, n_blocks=1).double()
    pts, times = _seq(B=1, T=3, N=5, seed=4)
    pts = pts.double().requires_grad_(True)
    w = torch.randn(1, 3, 4, dtype=torch.float64)

    def f():
        return (model.fuse(model.encode(pts, times.double())) * w).sum()

    params = [pts] + list(model.spatial_encoder.parameters()) + list(model.temporal_encoder.parameters()) \
        + list(model.fusion.parameters())
    assert check_gradients(f, params, rng, max_coords=8) <= FD_RTOL


# --- joint model ------------------------------------------------------------

def test_reverse_time_mirrors_the_sequence():
    pts, times = _seq(T=4)
    rp, rt = reverse_time(pts, times)
    assert torch.equal(rp[:, 0], pts[:, -1]) and torch.allclose(rt[0], 1 - times[0].flip(0))
    assert torch.all(rt[:, 1:] > rt[:, :-1])
    tok, S = torch.randn(2, 4, 5, 3), torch.randn(2, 4, 3)
    rtok, rS = reverse_spatial((tok, S))
    assert torch.equal(rtok[:, 0], tok[:, -1]) and torch.equal(rS[:, -1], S[:, 0])


def test_run_direction_shapes_and_reference_code():
    torch.manual_seed(0)
    model = JointModel(width=8, hidden=12, n_blocks=2)
    pts, times = _seq(B=2, T=3, N=10)
    out = model.run_direction(pts, times)
    assert out.e.shape == (2, 3, 8) and out.flow.shape == (2, 3, 10, 3)
    assert out.features.shape == (2, 3, 10, 12) and out.pooled_features.shape == (2, 3, 12)
    logits = model.decode_occupancy(torch.rand(2, 3, 6, 3), out.e, out.pooled_features, "train")
    assert logits.shape == (2, 3, 6)
    assert model.temporal_encoder.calls == 2
