import math

import pytest
import torch

from gecko import attention as A

D64 = torch.float64


def qkv(B, n, z, v, g, dtype=D64):
    return (torch.randn(B, n, z, dtype=dtype, generator=g), torch.randn(B, n, z, dtype=dtype, generator=g),
            torch.randn(B, n, v, dtype=dtype, generator=g))


def test_project_examples(g):
    d, z, v = 5, 4, 3
    xc, x = torch.randn(7, d, dtype=D64, generator=g), torch.randn(7, d, dtype=D64, generator=g)
    w_z, b_z = torch.randn(d, z, dtype=D64, generator=g), torch.randn(z, dtype=D64, generator=g)
    w_v, b_v = torch.randn(d, v, dtype=D64, generator=g), torch.randn(v, dtype=D64, generator=g)
    kq, nq = torch.rand(z, dtype=D64, generator=g), torch.randn(z, dtype=D64, generator=g)
    kk, nk = torch.rand(z, dtype=D64, generator=g), torch.randn(z, dtype=D64, generator=g)
    q, k, val, zn = A.project(xc, x, w_z, b_z, kq, nq, kk, nk, w_v, b_v)
    for t in range(7):
        zz = [sum(xc[t, i].item() * w_z[i, j].item() for i in range(d)) + b_z[j].item() for j in range(z)]
        norm = math.sqrt(sum(e * e for e in zz))
        for j in range(z):
            assert abs(zn[t, j].item() - zz[j] / (norm + 1e-8)) < 1e-12
            assert abs(q[t, j].item() - (kq[j].item() * zz[j] / (norm + 1e-8) + nq[j].item())) < 1e-12
        for j in range(v):
            pre = sum(x[t, i].item() * w_v[i, j].item() for i in range(d)) + b_v[j].item()
            assert abs(val[t, j].item() - pre / (1 + math.exp(-pre))) < 1e-12
    assert ((zn.norm(dim=-1) - 1).abs() < 1e-8).all()
    q1, *_ = A.project(xc, x, w_z, b_z, torch.ones(z, dtype=D64), torch.zeros(z, dtype=D64), kk, nk, w_v, b_v)
    assert torch.equal(q1, zn)


def test_rope(g):
    x = torch.randn(6, 8, dtype=D64, generator=g)
    assert torch.equal(A.apply_rope(x, torch.zeros(6)), x)
    r = A.apply_rope(x, torch.arange(6) * 37)
    pairs = lambda t: t.reshape(6, 4, 2).norm(dim=-1)  # noqa: E731
    assert (pairs(r) - pairs(x)).abs().max() < 1e-12
    q, k = torch.randn(8, dtype=D64, generator=g), torch.randn(8, dtype=D64, generator=g)
    dots = {}
    for m in range(0, 40, 3):
        for n in range(0, 40, 5):
            dot = (A.apply_rope(q, m) * A.apply_rope(k, n)).sum().item()
            dots.setdefault(m - n, []).append(dot)
    for vals in dots.values():
        assert max(vals) - min(vals) < 1e-10
    with pytest.raises(ValueError):
        A.apply_rope(torch.ones(2, 3), torch.arange(2))


def test_mask_examples():
    m = A.sliding_chunk_mask(6, 2)
    # 1-based token 3 -> row 2; token 5 -> row 4
    assert m[2].nonzero().flatten().tolist() == [0, 1, 2]
    assert m[4].nonzero().flatten().tolist() == [2, 3, 4]
    cm = A.chunk_mask(8, 4)
    assert cm[4].nonzero().flatten().tolist() == [4]


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-6), (D64, 1e-12)])
@pytest.mark.parametrize("mult", [(1, 0), (3, 0), (7, 3)])
def test_patterns_match_masked_oracle(dtype, tol, mult, g):
    c = 8
    n = mult[0] * c + mult[1]
    q, k, v = qkv(2, n, 6, 5, g, dtype)
    sca, cache = A.attend_sliding_chunk(q, k, v, c)
    assert (sca - A.full_attention(q, k, v, A.sliding_chunk_mask(n, c))).abs().max() < tol
    ch = A.attend_chunkwise(q, k, v, c)
    assert (ch - A.full_attention(q, k, v, A.chunk_mask(n, c))).abs().max() < tol
    for w in (1, 5, 8):
        ref = A.full_attention(q, k, v, A.sliding_window_mask(n, w))
        assert (A.attend_sliding_window(q, k, v, w) - ref).abs().max() < tol
        assert (A.attend_sliding_window_blocked(q, k, v, w, c) - ref).abs().max() < tol


def test_trivial_cases(g):
    q, k, v = qkv(1, 8, 4, 3, g)
    causal = A.full_attention(q, k, v, A.causal_mask(8))
    assert (A.attend_chunkwise(q, k, v, 8) - causal).abs().max() < 1e-12
    assert (A.attend_sliding_window(q, k, v, 50) - causal).abs().max() < 1e-12
    assert (A.attend_sliding_window(q, k, v, 1) - v).abs().max() < 1e-12
    assert (A.attend_sliding_chunk(q[:, :4], k[:, :4], v[:, :4], 4)[0] - causal[:, :4]).abs().max() < 1e-12
    assert torch.equal(A.full_attention(q[:, :1], k[:, :1], v[:, :1], A.causal_mask(1)), v[:, :1])
    # the first token of a later chunk only sees itself under chunk-wise attention
    ch = A.attend_chunkwise(q, k, v, 4)
    assert (ch[:, 4] - v[:, 4]).abs().max() < 1e-12


def test_sca_streaming_equals_batch(g):
    c = 4
    q, k, v = qkv(2, 5 * c, 6, 3, g)
    full, _ = A.attend_sliding_chunk(q, k, v, c)
    cache, outs = None, []
    for s in range(5):
        sl = slice(s * c, (s + 1) * c)
        o, cache = A.attend_sliding_chunk(q[:, sl], k[:, sl], v[:, sl], c, cache)
        outs.append(o)
        assert cache.k.shape[1] == c
    assert torch.equal(torch.cat(outs, 1), full)
    with pytest.raises(ValueError):
        A.attend_sliding_chunk(q[:, :c], k[:, :c], v[:, :c], c, A.KvCache(k[:, :2], v[:, :2]))


def test_fully_masked_row_rejected(g):
    q, k, v = qkv(1, 3, 2, 2, g)
    with pytest.raises(ValueError):
        A.full_attention(q, k, v, torch.zeros(3, 3, dtype=torch.bool))


def test_padded_positions_get_no_weight(g):
    c = 4
    q, k, v = qkv(1, 6, 3, 2, g)
    out, _ = A.attend_sliding_chunk(q, k, v, c)
    v2 = v.clone()
    # outputs for real tokens are unaffected by anything beyond them
    out2, _ = A.attend_sliding_chunk(q[:, :5], k[:, :5], v2[:, :5], c)
    assert (out[:, :5] - out2).abs().max() < 1e-12


def test_mac_formulas():
    n, c, z, v = 1024, 64, 128, 256
    assert A.sca_macs(n, c, z, v, warm=True) == n * 2 * c * (z + v)
    assert A.sca_macs(n, c, z, v) == n * 2 * c * (z + v) - c * c * (z + v)
    assert A.chunkwise_macs(n, c, z, v) * 2 == A.sca_macs(n, c, z, v, warm=True)
    assert A.swa_macs(5, 2, 1, 0) == 1 + 2 + 2 + 2 + 2
