"""Complex multi-dimensional damped EMA (CEMA).

Each input feature ``j`` is expanded into ``h`` complex lanes::

    u_t     = beta_j * x_{t,j}
    h_t     = alpha_j * u_t + (1 - alpha_j * delta_j) e^{i theta_j} * h_{t-1}
    y_{t,j} = Re(eta_j . h_t)

with ``theta_{j,k} = 2 pi k / h * omega_j``. A boundary mask ``M_t = 0``
multiplies the decay term so the state restarts from ``p_t``.

Layout: hidden states are ``(B, d, h)`` complex; sequences are ``(B, n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .scan import chunked_scan, inclusive_scan

DEFAULT_CHUNK = 32


@dataclass
class CemaParams:
    """Constrained CEMA parameters, all ``(d, h)``; ``eta`` is complex."""

    alpha: torch.Tensor
    delta: torch.Tensor
    theta: torch.Tensor
    beta: torch.Tensor
    eta: torch.Tensor

    @property
    def d(self):
        return self.alpha.shape[0]

    @property
    def h(self):
        return self.alpha.shape[1]

    def multiplier(self) -> torch.Tensor:
        r = 1 - self.alpha * self.delta
        return torch.complex(r * torch.cos(self.theta), r * torch.sin(self.theta))

    @classmethod
    def from_values(cls, alpha, delta, omega, beta, eta):
        """Build from base angles ``omega`` (d,) instead of full ``theta``."""
        h = alpha.shape[1]
        k = torch.arange(1, h + 1, dtype=alpha.dtype)
        theta = 2 * math.pi * k / h * omega[:, None]
        return cls(alpha, delta, theta, beta, eta)


def _check(x, params, mask, h0):
    if x.dim() != 3 or x.shape[-1] != params.d:
        raise ValueError(f"expected x of shape (B, n, {params.d}), got {tuple(x.shape)}")
    B, n, _ = x.shape
    if mask is not None and tuple(mask.shape) != (B, n):
        raise ValueError(f"mask must be {(B, n)}, got {tuple(mask.shape)}")
    if h0 is not None and tuple(h0.shape) != (B, params.d, params.h):
        raise ValueError(f"h0 must be {(B, params.d, params.h)}, got {tuple(h0.shape)}")


def _pairs(x, params, mask):
    # q: (B, d, h, n) with mask folded in, p: (B, d, h, n)
    q = params.multiplier()[None, :, :, None]
    if mask is not None:
        q = q * mask.to(x.dtype)[:, None, None, :]
    u = x.transpose(1, 2)[:, :, None, :] * (params.alpha * params.beta)[None, :, :, None]
    p = torch.complex(u, torch.zeros_like(u))
    return q, p


def _zeros_state(x, params):
    cdtype = torch.complex128 if x.dtype == torch.float64 else torch.complex64
    return torch.zeros(x.shape[0], params.d, params.h, dtype=cdtype)


def _readout(hs, eta):
    # hs: (B, d, h, n) -> (B, n, d)
    return torch.einsum("bdkn,dk->bnd", hs, eta).real


def cema_sequential(x, params: CemaParams, mask=None, h0=None):
    """Step-by-step recurrence. Returns ``(y, hN)``. Differentiable."""
    _check(x, params, mask, h0)
    if h0 is None:
        h0 = _zeros_state(x, params)
    q = params.multiplier()
    h = h0
    ys = []
    for t in range(x.shape[1]):
        qt = q if mask is None else q * mask[:, t, None, None].to(x.dtype)
        u = params.alpha * params.beta * x[:, t, :, None]
        h = qt * h + u
        ys.append(torch.einsum("bdk,dk->bd", h, params.eta).real)
    y = torch.stack(ys, dim=1) if ys else x.new_zeros(x.shape)
    return y, h


def cema_scan_full(x, params: CemaParams, mask=None, h0=None, chunk: int = DEFAULT_CHUNK):
    """Chunked parallel scan differentiated by autograd (stores every state)."""
    _check(x, params, mask, h0)
    if h0 is None:
        h0 = _zeros_state(x, params)
    q, p = _pairs(x, params, mask)
    hs, _ = chunked_scan(q, p, h0, chunk)
    return _readout(hs, params.eta), hs[..., -1] if x.shape[1] else h0


class _RematCema(torch.autograd.Function):
    """Chunked scan that keeps only the state entering each chunk.

    Forward: a sequential scan inside every chunk (all chunks at once), a
    log-depth scan over the chunk summaries, then a fix-up that adds each
    chunk's entry state. The backward pass walks chunks from last to first,
    re-runs the recurrence inside the chunk from its stored entry state and
    runs the adjoint ``lam_t = g_t conj(eta) + conj(q_{t+1}) lam_{t+1}``.
    Complex cotangents follow torch's convention ``dL/dRe + i dL/dIm``.
    Work is time-major: ``(n, B, d, h)``.
    """

    @staticmethod
    def forward(ctx, x, alpha, delta, theta, beta, eta_re, eta_im, h0_re, h0_im, mask, chunk):
        params = CemaParams(alpha, delta, theta, beta, torch.complex(eta_re, eta_im))
        h0 = torch.complex(h0_re, h0_im)
        hs, starts = _forward_time_major(x, params, mask, h0, chunk)
        n = x.shape[1]
        y = torch.einsum("nbdk,dk->bnd", hs, params.eta).real
        hN = hs[n - 1] if n else h0
        ctx.save_for_backward(x, alpha, delta, theta, beta, eta_re, eta_im, mask, starts)
        ctx.chunk = chunk
        return y, hN.real.contiguous(), hN.imag.contiguous(), starts

    @staticmethod
    def backward(ctx, gy, gN_re, gN_im, _gstarts):
        x, alpha, delta, theta, beta, eta_re, eta_im, mask, starts = ctx.saved_tensors
        if starts is None or starts.shape[0] != -(-x.shape[1] // ctx.chunk):
            raise RuntimeError("missing chunk boundary states")
        return _remat_backward(x, alpha, delta, theta, beta, eta_re, eta_im, mask, starts,
                               ctx.chunk, gy, gN_re, gN_im) + (None, None)


def _forward_time_major(x, params, mask, h0, chunk):
    B, n, d = x.shape
    C = chunk
    S = -(-n // C)
    pad = S * C - n
    q = params.multiplier()  # (d, h)
    u = (x.transpose(0, 1)[..., None] * (params.alpha * params.beta)).to(q.dtype)  # (n, B, d, h)
    m = mask.transpose(0, 1).to(x.dtype)  # (n, B)
    if pad:
        u = torch.cat([u, u.new_zeros((pad,) + u.shape[1:])])
        m = torch.cat([m, m.new_ones(pad, B)])
    u = u.reshape(S, C, B, d, -1)
    m = m.reshape(S, C, B, 1, 1)
    # local scans from a zero state, every chunk at once
    P = torch.empty_like(u)
    P[:, 0] = u[:, 0]
    for t in range(1, C):
        P[:, t] = q * m[:, t] * P[:, t - 1] + u[:, t]
    powers = torch.cumprod(q.expand(C, *q.shape), 0)  # q^1 .. q^C
    Qloc = powers[None, :, None] * torch.cumprod(m, 1)  # (S, C, B, d, h)
    # combine chunk summaries, then fix up each chunk with its entry state
    Qs, Ps = inclusive_scan(Qloc[:, -1].movedim(0, -1), P[:, -1].movedim(0, -1))
    ends = (Ps + Qs * h0[..., None]).movedim(-1, 0)
    starts = torch.cat([h0[None], ends[:-1]])
    hs = P + Qloc * starts[:, None]
    return hs.reshape(S * C, B, d, -1)[:n], starts


def _remat_backward(x, alpha, delta, theta, beta, eta_re, eta_im, mask, starts, chunk,
                    gy, gN_re, gN_im):
    B, n, d = x.shape
    eta = torch.complex(eta_re, eta_im)
    q = CemaParams(alpha, delta, theta, beta, eta).multiplier()
    qc = q.conj()
    ab = alpha * beta
    xt = x.transpose(0, 1)  # (n, B, d)
    m = mask.transpose(0, 1).to(x.dtype)[..., None, None]  # (n, B, 1, 1)
    g = gy.transpose(0, 1)[..., None]  # (n, B, d, 1)
    S = starts.shape[0]

    lam_next = torch.complex(gN_re, gN_im)  # cotangent flowing into h_{hi-1} from later steps
    dx = torch.zeros_like(xt)
    dab = torch.zeros_like(alpha)
    Gq = torch.zeros_like(q)
    deta = torch.zeros_like(eta)
    for s in range(S - 1, -1, -1):
        lo, hi = s * chunk, min((s + 1) * chunk, n)
        L = hi - lo
        u = (xt[lo:hi, ..., None] * ab).to(q.dtype)
        # rematerialize states h_{lo-1} .. h_{hi-1} from the stored entry state
        hs = torch.empty((L + 1,) + starts.shape[1:], dtype=q.dtype)
        hs[0] = starts[s]
        for t in range(L):
            hs[t + 1] = q * m[lo + t] * hs[t] + u[t]
        b = g[lo:hi] * eta.conj()
        lam = torch.empty_like(hs[1:])
        for t in range(L - 1, -1, -1):
            lam[t] = b[t] + lam_next
            lam_next = qc * m[lo + t] * lam[t]
        Gq += (hs[:-1].conj() * lam * m[lo:hi]).sum((0, 1))
        ge = g[lo:hi]
        deta += torch.complex((ge * hs[1:].real).sum((0, 1)), -(ge * hs[1:].imag).sum((0, 1)))
        # p_t is real, so only Re(lam) reaches x, alpha and beta
        lr = lam.real
        dx[lo:hi] = (lr * ab).sum(-1)
        dab += (lr * xt[lo:hi, ..., None]).sum((0, 1))
    dh0 = lam_next

    e = torch.complex(torch.cos(theta), torch.sin(theta))
    r = 1 - alpha * delta
    dr = (Gq * e.conj()).real
    dtheta = (Gq * (1j * r * e).conj()).real
    dalpha = dab * beta - dr * delta
    ddelta = -dr * alpha
    dbeta = dab * alpha
    return (dx.transpose(0, 1), dalpha, ddelta, dtheta, dbeta, deta.real, deta.imag,
            dh0.real, dh0.imag)


def cema_scan(x, params: CemaParams, mask=None, h0=None, chunk: int = DEFAULT_CHUNK):
    """Chunked scan with a rematerializing backward.

    Returns ``(y, hN, starts)``; ``starts`` (ceil(n/chunk), B, d, h) holds the
    only states kept for the backward pass.
    """
    _check(x, params, mask, h0)
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    if h0 is None:
        h0 = _zeros_state(x, params)
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=x.dtype)
    y, hr, hi, starts = _RematCema.apply(
        x, params.alpha, params.delta, params.theta, params.beta,
        params.eta.real, params.eta.imag, h0.real, h0.imag, mask.to(x.dtype), chunk,
    )
    return y, torch.complex(hr, hi), starts


def stability_bound(params: CemaParams, bound: float) -> torch.Tensor:
    """Per-lane bound on ``|h_t|`` for ``|x| <= bound`` and ``h_0 = 0``."""
    rho = (1 - params.alpha * params.delta).abs()
    return (params.alpha * params.beta).abs() * bound / (1 - rho)


class Cema(nn.Module):
    """Learnable CEMA layer; alpha/delta stored as logits."""

    def __init__(self, d: int, h: int, chunk: int = DEFAULT_CHUNK, generator=None, dtype=torch.float32):
        super().__init__()
        self.d, self.h, self.chunk = d, h, chunk
        g = generator
        kw = dict(dtype=dtype)

        def logit_uniform(lo, hi):
            u = lo + (hi - lo) * torch.rand(d, h, generator=g, **kw)
            return torch.log(u) - torch.log1p(-u)

        self.alpha_logit = nn.Parameter(logit_uniform(0.1, 0.9))
        self.delta_logit = nn.Parameter(logit_uniform(0.1, 0.9))
        # log-uniform base angles in [1e-2, 1]
        self.omega = nn.Parameter(10 ** (-2 * torch.rand(d, generator=g, **kw)))
        self.beta = nn.Parameter(torch.randn(d, h, generator=g, **kw) * 0.02 + 1.0 / math.sqrt(h))
        self.eta_re = nn.Parameter(torch.randn(d, h, generator=g, **kw) / math.sqrt(h))
        self.eta_im = nn.Parameter(torch.randn(d, h, generator=g, **kw) / math.sqrt(h))

    def params(self) -> CemaParams:
        return CemaParams.from_values(
            torch.sigmoid(self.alpha_logit),
            torch.sigmoid(self.delta_logit),
            self.omega,
            self.beta,
            torch.complex(self.eta_re, self.eta_im),
        )

    def forward(self, x, mask=None, h0=None):
        y, hN, _ = cema_scan(x, self.params(), mask, h0, self.chunk)
        return y, hN
