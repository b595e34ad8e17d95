"""Affine-pair algebra and prefix scans for diagonal linear recurrences.

A recurrence ``h_t = q_t * h_{t-1} + p_t`` is a left fold of the pairs
``(q_t, p_t)`` under ``(q_b, p_b) . (q_a, p_a) = (q_b q_a, q_b p_a + p_b)``,
which is associative with identity ``(1, 0)``. Everything here works on the
last tensor dimension and accepts real or complex tensors.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def affine_combine(b, a):
    """Compose ``b`` after ``a``: returns ``(q_b * q_a, q_b * p_a + p_b)``."""
    qb, pb = b
    qa, pa = a
    return qb * qa, qb * pa + pb


def _shift(t: torch.Tensor, k: int, fill: float) -> torch.Tensor:
    # shift right by k along the last dim, filling the front
    if t.is_complex():
        re = F.pad(t.real[..., :-k], (k, 0), value=fill)
        im = F.pad(t.imag[..., :-k], (k, 0), value=0.0)
        return torch.complex(re, im)
    return F.pad(t[..., :-k], (k, 0), value=fill)


def inclusive_scan(q: torch.Tensor, p: torch.Tensor):
    """Hillis-Steele log-depth inclusive scan along the last dim.

    Returns ``(Q, P)`` with ``(Q_t, P_t) = s_t . s_{t-1} . ... . s_0``, so
    ``P_t`` is the state reached from a zero initial state and ``Q_t`` is the
    accumulated multiplier applied to any initial state.
    """
    q, p = torch.broadcast_tensors(q, p)
    n = q.shape[-1]
    k = 1
    while k < n:
        q_prev = _shift(q, k, 1.0)
        p_prev = _shift(p, k, 0.0)
        q, p = affine_combine((q, p), (q_prev, p_prev))
        k *= 2
    return q, p


def local_scan(q: torch.Tensor, p: torch.Tensor):
    """Inclusive scan by stepping along the last dim, vectorized over the rest.

    Same result as ``inclusive_scan``; cheaper for short spans since it
    does ``n`` fused steps instead of ``n log n`` work plus shifted copies.
    """
    q, p = torch.broadcast_tensors(q, p)
    qt = q.movedim(-1, 0)
    pt = p.movedim(-1, 0)
    Q, P = [qt[0]], [pt[0]]
    for t in range(1, pt.shape[0]):
        Q.append(qt[t] * Q[-1])
        P.append(qt[t] * P[-1] + pt[t])
    return torch.stack(Q, -1), torch.stack(P, -1)


def sequential_scan(q: torch.Tensor, p: torch.Tensor, h0=None):
    """Plain left fold; the reference the parallel scans are checked against."""
    q, p = torch.broadcast_tensors(q, p)
    h = torch.zeros_like(p[..., 0]) if h0 is None else h0
    out = []
    for t in range(p.shape[-1]):
        h = q[..., t] * h + p[..., t]
        out.append(h)
    return torch.stack(out, dim=-1)


def chunked_scan(q: torch.Tensor, p: torch.Tensor, h0: torch.Tensor, chunk: int):
    """Scan within fixed-size chunks, then scan the chunk summaries.

    Returns ``(h, starts)`` where ``h`` has the input's time length and
    ``starts[..., s]`` is the state entering chunk ``s`` (``starts[..., 0]``
    is ``h0``). Padding steps use the identity pair so they never change the
    carried state.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    q, p = torch.broadcast_tensors(q, p)
    n = p.shape[-1]
    S = -(-n // chunk)
    pad = S * chunk - n
    if pad:
        q = torch.cat([q, torch.ones(q.shape[:-1] + (pad,), dtype=q.dtype)], -1)
        p = torch.cat([p, torch.zeros(p.shape[:-1] + (pad,), dtype=p.dtype)], -1)
    qc = q.reshape(q.shape[:-1] + (S, chunk))
    pc = p.reshape(p.shape[:-1] + (S, chunk))
    Ql, Pl = local_scan(qc, pc)
    Qs, Ps = inclusive_scan(Ql[..., -1], Pl[..., -1])
    ends = Ps + Qs * h0.unsqueeze(-1)
    starts = torch.cat([h0.unsqueeze(-1), ends[..., :-1]], dim=-1)
    h = Pl + Ql * starts.unsqueeze(-1)
    h = h.reshape(h.shape[:-2] + (S * chunk,))[..., :n]
    return h, starts
