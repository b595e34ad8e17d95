"""Adaptive working memory: chunk-level linear attention with an online softmax.

For chunk ``s`` with keys ``K_s`` (c, z) the key kernels normalize over time::

    w_s = sum_i exp(k_{s,i})          z_s = z_{s-1} + w_s
    phi(k)   = exp(k) / w_s           phi_s(k) = exp(k) / z_s = (w_s/z_s) phi(k)

and the query kernel ``psi`` is a softmax over features. The memory update
with the delta correction is::

    M_s = (z_{s-1}/z_s) * M_s-1 + phi_s(K_s)^T (V_s - psi(K_s) M_{s-1})

``z`` is kept as a per-dimension running max ``r`` plus a mantissa
``z * exp(-r)`` so arbitrarily long streams never overflow. ``M`` itself is
a normalized average and needs no rescaling.

Retrieval is shifted by one chunk relative to the update so the memory only
covers what the sliding chunk attention can no longer see: chunk ``s`` reads
a memory that has absorbed chunks ``1..s-2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import matmul, softmax

log = logging.getLogger(__name__)

TAU_FLOOR = 1e-8


def psi(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the feature (last) dimension."""
    return softmax(x, -1)


@dataclass
class MemoryState:
    M: torch.Tensor  # (B, z, v)
    zt: torch.Tensor  # (B, z) mantissa of the running denominator
    r: torch.Tensor  # (B, z) running max of keys seen (log scale of zt)
    chunks: int = 0

    @classmethod
    def zeros(cls, batch, zdim, vdim, dtype=torch.float32):
        return cls(
            torch.zeros(batch, zdim, vdim, dtype=dtype),
            torch.zeros(batch, zdim, dtype=dtype),
            torch.full((batch, zdim), float("-inf"), dtype=dtype),
        )

    def log_z(self):
        return self.r + torch.log(self.zt)

    def detach(self):
        return MemoryState(self.M.detach(), self.zt.detach(), self.r, self.chunks)


@dataclass
class ChunkKernels:
    phi: torch.Tensor  # (B, c, z) local softmax over the chunk's positions
    phi_s: torch.Tensor  # (B, c, z) softmax over all positions so far
    ratio: torch.Tensor  # (B, z) z_{s-1} / z_s
    frac: torch.Tensor  # (B, z) w_s / z_s
    zt: torch.Tensor
    r: torch.Tensor


def kernels(state: MemoryState, k: torch.Tensor, valid=None) -> ChunkKernels:
    """Key kernels for one chunk ``k`` (B, c, z), rebasing the running max.

    ``valid`` (B, c) marks real positions; padded ones get zero weight.
    """
    if valid is not None:
        k = k.masked_fill(~valid[..., None], float("-inf"))
    m = k.detach().amax(dim=1)
    e_loc = torch.exp(k - m[:, None])
    w_loc = e_loc.sum(1)  # w_s * exp(-m)
    phi = e_loc / w_loc[:, None]
    r_new = torch.maximum(state.r, m)
    old = state.zt * torch.exp(state.r - r_new)
    w = w_loc * torch.exp(m - r_new)
    zt = old + w
    ratio = old / zt
    frac = w / zt
    return ChunkKernels(phi, frac[:, None] * phi, ratio, frac, zt, r_new)


def awm_update(state: MemoryState, k, v, valid=None) -> MemoryState:
    """Fold one chunk into memory with the delta correction."""
    kn = kernels(state, k, valid)
    pred = matmul(psi(k), state.M)
    resid = v - pred
    if valid is not None:
        resid = resid * valid[..., None]
    M = kn.ratio[..., None] * state.M + matmul(kn.phi_s.transpose(1, 2), resid)
    return MemoryState(M, kn.zt, kn.r, state.chunks + 1)


def awm_update_nodelta(state: MemoryState, k, v, valid=None) -> MemoryState:
    """Fold one chunk in without the delta correction (pure renormalized sum)."""
    kn = kernels(state, k, valid)
    vv = v if valid is None else v * valid[..., None]
    M = kn.ratio[..., None] * state.M + matmul(kn.phi_s.transpose(1, 2), vv)
    return MemoryState(M, kn.zt, kn.r, state.chunks + 1)


def awm_retrieve(state: MemoryState, q) -> torch.Tensor:
    """``psi(Q_m) M``; zero while the memory is empty."""
    if state.chunks == 0:
        return q.new_zeros(q.shape[:-1] + (state.M.shape[-1],))
    return matmul(psi(q), state.M)


def memory_projections(zn, eta_q, rho_q, eta_k, rho_k):
    """Memory queries and keys as per-dimension affine maps of ``Z'``."""
    return eta_q * zn + rho_q, eta_k * zn + rho_k


class MemoryProjection(nn.Module):
    def __init__(self, z, generator=None, dtype=torch.float32):
        super().__init__()
        kw = dict(generator=generator, dtype=dtype)
        scale = math.sqrt(z)
        self.eta_q = nn.Parameter(scale * (1 + 0.02 * torch.randn(z, **kw)))
        self.rho_q = nn.Parameter(torch.zeros(z, dtype=dtype))
        self.eta_k = nn.Parameter(scale * (1 + 0.02 * torch.randn(z, **kw)))
        self.rho_k = nn.Parameter(torch.zeros(z, dtype=dtype))

    def forward(self, zn):
        return memory_projections(zn, self.eta_q, self.rho_q, self.eta_k, self.rho_k)


def awm_chunks(qm, km, v, c: int, state: MemoryState, prev=None, delta: bool = True):
    """Retrieve-then-update over consecutive chunks of a ``(B, n, .)`` sequence.

    ``prev`` is the ``(K_m, V)`` of the chunk before ``qm``'s first chunk that
    has not been absorbed yet. Returns ``(O_m, state', prev')``. The last
    chunk is always left pending, so it may be padded.
    """
    B, n, _ = qm.shape
    update = awm_update if delta else awm_update_nodelta
    outs = []
    for lo in range(0, n, c):
        hi = min(lo + c, n)
        outs.append(awm_retrieve(state, qm[:, lo:hi]))
        if prev is not None:
            state = update(state, *prev)
        if hi - lo != c and hi != n:
            raise ValueError("only the final chunk may be partial")
        prev = (km[:, lo:hi], v[:, lo:hi])
    out = torch.cat(outs, dim=1) if outs else v.new_zeros(B, 0, v.shape[-1])
    return out, state, prev


# ------------------------------------------------------------------ baseline


@dataclass
class DeltaNetState:
    M: torch.Tensor  # (B, z, v)
    tau: torch.Tensor  # (B, z)

    @classmethod
    def zeros(cls, batch, zdim, vdim, dtype=torch.float32):
        return cls(torch.zeros(batch, zdim, vdim, dtype=dtype), torch.zeros(batch, zdim, dtype=dtype))


def _clamp_tau(tau):
    if (tau < TAU_FLOOR).any():
        log.warning("delta-net normalizer below %g, clamping", TAU_FLOOR)
        return tau.clamp_min(TAU_FLOOR)
    return tau


def deltanet_baseline(q, k, v, c: int, state: DeltaNetState | None = None):
    """Chunked linear attention with delta rule and an explicit normalizer.

    Elementwise SiLU kernels for both keys and queries. Returns
    ``(O, state')`` where chunk ``s`` reads ``M_{s-1}`` normalized by
    ``psi(Q_s) tau_{s-1}``.
    """
    B, n, zdim = q.shape
    if state is None:
        state = DeltaNetState.zeros(B, zdim, v.shape[-1], q.dtype)
    M, tau = state.M, state.tau
    outs = []
    for lo in range(0, n, c):
        qs, ks, vs = q[:, lo : lo + c], k[:, lo : lo + c], v[:, lo : lo + c]
        t = _clamp_tau(tau)
        pq, pk = F.silu(qs), F.silu(ks)
        outs.append(matmul(pq, M) / matmul(pq, t[..., None]))
        corr = matmul(pk, M) / matmul(pk, t[..., None])
        phik = F.silu(ks)
        M = M + matmul(phik.transpose(1, 2), vs - corr)
        tau = tau + phik.sum(1)
    return torch.cat(outs, dim=1), DeltaNetState(M, tau)
