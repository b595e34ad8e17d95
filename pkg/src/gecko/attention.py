"""Gated projections, rotary embeddings and chunk-sparse attention patterns.

All attention here is single-head and causal. Shapes are ``(B, n, z)`` for
queries/keys and ``(B, n, v)`` for values. Scores are scaled by
``1/sqrt(z)``.

Patterns (0-based positions, chunk size ``c``):

* chunk-wise:      key j visible to query i iff j <= i and j//c == i//c
* sliding window:  j <= i and i - j < w
* sliding chunk:   j <= i and j//c in {i//c - 1, i//c}
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import matmul, matmul_add_, softmax

NORM_FLOOR = 1e-8


# ---------------------------------------------------------------- projections


def normalize_rows(z: torch.Tensor) -> torch.Tensor:
    return z / (z.norm(dim=-1, keepdim=True) + NORM_FLOOR)


def project(x_cema, x, w_z, b_z, kappa_q, nu_q, kappa_k, nu_k, w_v, b_v):
    """Shared normalized representation and the Q/K/V derived from it.

    ``Z = x_cema W_z + b_z``, ``Z' = Z/||Z||``, ``Q = kappa_q Z' + nu_q``,
    ``K = kappa_k Z' + nu_k``, ``V = silu(x W_v + b_v)``.
    """
    z = matmul(x_cema, w_z) + b_z
    zn = normalize_rows(z)
    q = kappa_q * zn + nu_q
    k = kappa_k * zn + nu_k
    v = F.silu(matmul(x, w_v) + b_v)
    return q, k, v, zn


class GatedProjection(nn.Module):
    def __init__(self, d, z, v, generator=None, dtype=torch.float32):
        super().__init__()
        kw = dict(generator=generator, dtype=dtype)
        self.w_z = nn.Parameter(torch.randn(d, z, **kw) / math.sqrt(d))
        self.b_z = nn.Parameter(torch.zeros(z, dtype=dtype))
        # Z' has unit norm; a sqrt(z) scale gives Q and K unit-RMS entries
        scale = math.sqrt(z)
        self.kappa_q = nn.Parameter(scale * (1 + 0.02 * torch.randn(z, **kw)))
        self.nu_q = nn.Parameter(torch.zeros(z, dtype=dtype))
        self.kappa_k = nn.Parameter(scale * (1 + 0.02 * torch.randn(z, **kw)))
        self.nu_k = nn.Parameter(torch.zeros(z, dtype=dtype))
        self.w_v = nn.Parameter(torch.randn(d, v, **kw) / math.sqrt(d))
        self.b_v = nn.Parameter(torch.zeros(v, dtype=dtype))

    def forward(self, x_cema, x):
        return project(x_cema, x, self.w_z, self.b_z, self.kappa_q, self.nu_q,
                       self.kappa_k, self.nu_k, self.w_v, self.b_v)


# ----------------------------------------------------------------------- rope


def apply_rope(x: torch.Tensor, positions, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive feature pairs by ``pos * base^(-2i/z)``.

    ``positions`` broadcasts against ``x.shape[:-1]`` (global token indices).
    """
    zdim = x.shape[-1]
    if zdim % 2:
        raise ValueError(f"rotary embedding needs an even feature dim, got {zdim}")
    positions = torch.as_tensor(positions, dtype=x.dtype)
    freqs = base ** (-torch.arange(0, zdim, 2, dtype=x.dtype) / zdim)
    ang = positions[..., None] * freqs
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


# --------------------------------------------------------------------- masks


def causal_mask(n):
    i = torch.arange(n)
    return i[None, :] <= i[:, None]


def chunk_mask(n, c):
    i = torch.arange(n)
    return causal_mask(n) & ((i[None, :] // c) == (i[:, None] // c))


def sliding_window_mask(n, w):
    i = torch.arange(n)
    return causal_mask(n) & ((i[:, None] - i[None, :]) < w)


def sliding_chunk_mask(n, c):
    i = torch.arange(n)
    qc, kc = i[:, None] // c, i[None, :] // c
    return causal_mask(n) & ((kc == qc) | (kc == qc - 1))


def full_attention(q, k, v, mask):
    """Dense masked softmax attention, the reference for every pattern.

    ``mask`` is ``(n, n)`` or ``(B, n, n)`` boolean, True = visible.
    """
    if not mask.any(-1).all():
        raise ValueError("attention mask leaves a query with no visible key")
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    return matmul(softmax(scores, -1), v)


# ------------------------------------------------------------ chunked layouts


def _pad_to_chunks(t, c):
    n = t.shape[1]
    S = max(1, -(-n // c))
    pad = S * c - n
    if pad:
        t = F.pad(t, (0, 0, 0, pad))
    return t.reshape(t.shape[0], S, c, t.shape[-1]), S


def _valid(B, n, S, c):
    return (torch.arange(S * c) < n).reshape(1, S, c).expand(B, S, c)


def attend_chunkwise(q, k, v, c: int):
    """Causal attention restricted to each chunk."""
    B, n, zdim = q.shape
    qc, S = _pad_to_chunks(q, c)
    kc, _ = _pad_to_chunks(k, c)
    vc, _ = _pad_to_chunks(v, c)
    valid = _valid(B, n, S, c)
    allowed = causal_mask(c)[None, None] & valid[:, :, None, :]
    scores = _masked_scores(qc, kc, allowed)
    m = scores.amax(-1, keepdim=True).detach()
    e = scores.sub_(m).exp_()
    out = matmul(e / e.sum(-1, keepdim=True), vc)
    return out.reshape(B, S * c, -1)[:, :n]


def _masked_scores(qc, kc, allowed=None):
    # in-place scale and mask on the fresh product; autograd-safe since
    # neither op needs its input in the backward pass
    s = matmul(qc, kc.transpose(-1, -2)).mul_(1 / math.sqrt(qc.shape[-1]))
    if allowed is not None:
        s.masked_fill_(~allowed, float("-inf"))
    return s


@dataclass
class KvCache:
    """Keys/values (and optional document ids) of the previous chunk."""

    k: torch.Tensor | None = None
    v: torch.Tensor | None = None
    seg: torch.Tensor | None = None

    @property
    def empty(self):
        return self.k is None


def _chunk_major(t, c):
    # (B, n, f) -> (S*B, c, f) with chunk index outermost, so "the previous
    # chunk" of every row is the same tensor shifted by B rows (a view)
    tc, S = _pad_to_chunks(t, c)
    return tc.transpose(0, 1).reshape(S * t.shape[0], c, t.shape[-1]), S


def attend_sliding_chunk(q, k, v, c: int, cache: KvCache | None = None, seg=None):
    """Each chunk attends to itself (causally) and all of the previous chunk.

    ``cache`` supplies the chunk preceding ``q``'s first chunk; an empty
    cache means the sequence starts here. ``seg`` (B, n) optional document
    ids: keys from another document are hidden. Returns ``(out, cache')``
    where ``cache'`` holds the last (full) chunk's keys and values.
    """
    B, n, zdim = q.shape
    cache = cache or KvCache()
    if not cache.empty and cache.k.shape[1] != c:
        raise ValueError(f"cached chunk has {cache.k.shape[1]} positions, expected {c}")
    q3, S = _chunk_major(q, c)
    k3, _ = _chunk_major(k, c)
    v3, _ = _chunk_major(v, c)
    valid = (torch.arange(S * c) < n).reshape(S, 1, c).expand(S, B, c).reshape(S * B, c)
    cur_allowed = causal_mask(c)[None] & valid[:, None, :]
    rest_allowed = first_allowed = None
    if seg is not None:
        s3, _ = _chunk_major(seg[..., None].to(torch.float64), c)
        s3 = s3[..., 0]
        cur_allowed = cur_allowed & (s3[:, None, :] == s3[:, :, None])
        rest_allowed = s3[:-B, None, :] == s3[B:, :, None]
        if not cache.empty:
            prev_seg = torch.full((B, c), float("nan"), dtype=s3.dtype) if cache.seg is None \
                else cache.seg.to(s3.dtype)
            first_allowed = prev_seg[:, None, :] == s3[:B, :, None]

    # current chunk, previous chunk for chunks 1.., cached chunk for chunk 0;
    # the three score blocks share one softmax per query row
    s_cur = _masked_scores(q3, k3, cur_allowed)
    s_rest = _masked_scores(q3[B:], k3[:-B], rest_allowed) if S > 1 else None
    s_first = None if cache.empty else _masked_scores(q3[:B], cache.k, first_allowed)
    with torch.no_grad():
        m = s_cur.amax(-1, keepdim=True)
        if s_rest is not None:
            m[B:] = torch.maximum(m[B:], s_rest.amax(-1, keepdim=True))
        if s_first is not None:
            m[:B] = torch.maximum(m[:B], s_first.amax(-1, keepdim=True))
    e_cur = s_cur.sub_(m).exp_()
    den = e_cur.sum(-1, keepdim=True)
    extra = []
    if s_first is not None:
        e_first = s_first.sub_(m[:B]).exp_()
        extra.append(e_first.sum(-1, keepdim=True))
    else:
        extra.append(torch.zeros_like(den[:B]))
    if s_rest is not None:
        e_rest = s_rest.sub_(m[B:]).exp_()
        extra.append(e_rest.sum(-1, keepdim=True))
    den = den + torch.cat(extra, 0)
    out = matmul(e_cur / den, v3)
    if s_rest is not None:
        matmul_add_(out[B:], e_rest / den[B:], v3[:-B])
    if s_first is not None:
        matmul_add_(out[:B], e_first / den[:B], cache.v)
    out = out.reshape(S, B, c, -1).transpose(0, 1).reshape(B, S * c, -1)[:, :n]
    new_seg = None if seg is None else seg[:, -c:]
    return out, KvCache(k[:, -c:], v[:, -c:], new_seg)


def attend_sliding_window(q, k, v, w: int):
    """Per-token sliding window: one small product per query position."""
    B, n, zdim = q.shape
    scale = 1 / math.sqrt(zdim)
    outs = []
    for i in range(n):
        lo = max(0, i - w + 1)
        s = matmul(q[:, i : i + 1], k[:, lo : i + 1].transpose(-1, -2)) * scale
        outs.append(matmul(softmax(s, -1), v[:, lo : i + 1]))
    return torch.cat(outs, dim=1)


def attend_sliding_window_blocked(q, k, v, w: int, block: int):
    """Sliding window computed per query block against a banded key slab."""
    B, n, zdim = q.shape
    nb = -(-w // block)  # previous blocks that can fall inside the window
    qc, S = _pad_to_chunks(q, block)
    kc, _ = _pad_to_chunks(k, block)
    vc, _ = _pad_to_chunks(v, block)
    valid = _valid(B, n, S, block)
    kp = F.pad(kc, (0, 0, 0, 0, nb, 0))
    vp = F.pad(vc, (0, 0, 0, 0, nb, 0))
    vld = F.pad(valid, (0, 0, nb, 0))
    span = nb + 1
    keys = torch.stack([kp[:, j : j + S] for j in range(span)], dim=2).flatten(2, 3)
    vals = torch.stack([vp[:, j : j + S] for j in range(span)], dim=2).flatten(2, 3)
    kv_valid = torch.stack([vld[:, j : j + S] for j in range(span)], dim=2).flatten(2, 3)
    qi = torch.arange(block)[:, None] + nb * block
    kj = torch.arange(span * block)[None, :]
    band = (kj <= qi) & (qi - kj < w)
    allowed = band[None, None] & kv_valid[:, :, None, :]
    scores = matmul(qc, keys.transpose(-1, -2)) / math.sqrt(zdim)
    scores = scores.masked_fill(~allowed, float("-inf"))
    return matmul(softmax(scores, -1), vals).reshape(B, S * block, -1)[:, :n]


# ------------------------------------------------------------------ costs


def sca_macs(n, c, z, v, warm: bool = False):
    """Multiply-adds of ``attend_sliding_chunk``; a cold start has no chunk before the first."""
    S = -(-n // c)
    return (2 * S - (0 if warm else 1)) * c * c * (z + v)


def chunkwise_macs(n, c, z, v):
    return -(-n // c) * c * c * (z + v)


def swa_macs(n, w, z, v):
    """Per-token sliding window (exact number of visible keys)."""
    keys = n * (n + 1) // 2 if n <= w else w * n - w * (w - 1) // 2
    return keys * (z + v)


def swa_blocked_macs(n, w, block, z, v):
    span = -(-w // block) + 1
    return -(-n // block) * block * span * block * (z + v)
