"""Timestep normalization with cumulative (TSN) or decayed (TSDN) statistics.

Features are split into ``k`` groups. Per timestep the group mean and
population variance are folded into running statistics:

* TSN:  ``m_t = mean(mu_1..mu_t)``, ``v_t = mean(var_1..var_t)``
* TSDN: ``m_t = b1 m_{t-1} + (1-b1) mu_t`` (same for ``v`` with ``b2``),
  then ``m'_t = m_t / (1 - b1^t)`` and ``v'_t = v_t / (1 - b2^t)``.

The output is ``(x - m') / sqrt(v' + eps) * gamma + bias`` with per-feature
``gamma`` and ``bias``. A reset mask (0 = new document) restarts the
statistics and the step counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .scan import inclusive_scan


@dataclass(frozen=True)
class NormConfig:
    groups: int = 1
    beta1: float = 0.999
    beta2: float = 0.9999
    eps: float = 1e-5
    variant: str = "tsdn"  # or "tsn"
    # divide the instantaneous mean instead of m_t by (1 - b1^t)
    literal_mean: bool = False

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.variant not in ("tsdn", "tsn"):
            raise ValueError(f"unknown norm variant {self.variant!r}")


@dataclass
class NormState:
    """Running statistics per batch row and group.

    For TSDN ``m``/``v`` are the decayed averages; for TSN they are the
    running sums. ``t`` counts steps since the last reset.
    """

    m: torch.Tensor  # (B, k)
    v: torch.Tensor  # (B, k)
    t: torch.Tensor  # (B,)

    @classmethod
    def zeros(cls, batch, groups, dtype=torch.float32):
        z = torch.zeros(batch, groups, dtype=dtype)
        return cls(z, z.clone(), torch.zeros(batch, dtype=dtype))

    def to_dict(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    @classmethod
    def from_dict(cls, d):
        return cls(d["m"], d["v"], d["t"])

    def detach(self):
        return NormState(self.m.detach(), self.v.detach(), self.t.detach())


def group_stats(x: torch.Tensor, groups: int):
    """Per-group mean and population variance over the last dim."""
    d = x.shape[-1]
    if d % groups:
        raise ValueError(f"dim {d} not divisible by {groups} groups")
    xg = x.reshape(x.shape[:-1] + (groups, d // groups))
    mu = xg.mean(-1)
    var = ((xg - mu.unsqueeze(-1)) ** 2).mean(-1)
    return mu, var


def bias_correction(beta: float, t: torch.Tensor) -> torch.Tensor:
    """``1 - beta**t`` computed as ``-expm1(t log beta)``; safe for huge ``t``."""
    if beta == 0.0:
        return torch.ones_like(t)
    return -torch.expm1(t * torch.log(torch.tensor(beta, dtype=t.dtype)))


def decayed_stats(stat, beta, init, mask=None):
    """Run ``m_t = beta * M_t * m_{t-1} + (1 - beta) * stat_t`` along dim 1.

    ``stat`` is ``(B, n, k)``, ``init`` is ``(B, k)``. Uses the affine scan.
    """
    s = stat.transpose(1, 2)
    q = torch.full_like(s, beta)
    if mask is not None:
        q = q * mask[:, None, :].to(s.dtype)
    Q, P = inclusive_scan(q, (1 - beta) * s)
    return (P + Q * init[..., None]).transpose(1, 2)


def step_counts(t0, n, mask=None, dtype=torch.float32):
    """Step counter after each position: ``t_i = M_i t_{i-1} + 1``."""
    B = t0.shape[0]
    if mask is None:
        return t0[:, None] + torch.arange(1, n + 1, dtype=dtype)[None]
    ones = torch.ones(B, n, dtype=dtype)
    Q, P = inclusive_scan(mask.to(dtype), ones)
    return P + Q * t0[:, None]


def _normalize(x, mean, var, cfg, gamma, bias):
    k = cfg.groups
    xg = x.reshape(x.shape[:-1] + (k, x.shape[-1] // k))
    y = (xg - mean.unsqueeze(-1)) / torch.sqrt(var.unsqueeze(-1) + cfg.eps)
    y = y.reshape(x.shape)
    if gamma is not None:
        y = y * gamma
    if bias is not None:
        y = y + bias
    return y


def tsdn_batch(x, cfg: NormConfig, state0: NormState | None = None, gamma=None, bias=None, mask=None):
    """Normalize a whole ``(B, n, d)`` sequence; returns ``(y, stateN)``."""
    B, n, _ = x.shape
    if state0 is None:
        state0 = NormState.zeros(B, cfg.groups, x.dtype)
    mu, var = group_stats(x, cfg.groups)
    t = step_counts(state0.t, n, mask, x.dtype)
    if cfg.variant == "tsn":
        # running sums, then divide by the step count
        Sm = decayed_sums(mu, state0.m, mask)
        Sv = decayed_sums(var, state0.v, mask)
        mean, v = Sm / t[..., None], Sv / t[..., None]
        new = NormState(Sm[:, -1], Sv[:, -1], t[:, -1]) if n else state0
    else:
        m = decayed_stats(mu, cfg.beta1, state0.m, mask)
        v_run = decayed_stats(var, cfg.beta2, state0.v, mask)
        c1 = bias_correction(cfg.beta1, t)[..., None]
        c2 = bias_correction(cfg.beta2, t)[..., None]
        mean = (mu if cfg.literal_mean else m) / c1
        v = v_run / c2
        new = NormState(m[:, -1], v_run[:, -1], t[:, -1]) if n else state0
    return _normalize(x, mean, v, cfg, gamma, bias), new


def decayed_sums(stat, init, mask=None):
    """Running sums along dim 1 that restart where ``mask`` is 0."""
    s = stat.transpose(1, 2)
    q = torch.ones_like(s)
    if mask is not None:
        q = q * mask[:, None, :].to(s.dtype)
    Q, P = inclusive_scan(q, s)
    return (P + Q * init[..., None]).transpose(1, 2)


def tsdn_step(x_t, state: NormState, cfg: NormConfig, gamma=None, bias=None, reset=None):
    """One timestep of TSDN for ``x_t`` of shape ``(B, d)``."""
    mu, var = group_stats(x_t, cfg.groups)
    keep = 1.0 if reset is None else (1 - reset.to(x_t.dtype))
    keep_g = keep if reset is None else keep[:, None]
    t = state.t * keep + 1
    m = cfg.beta1 * keep_g * state.m + (1 - cfg.beta1) * mu
    v = cfg.beta2 * keep_g * state.v + (1 - cfg.beta2) * var
    mean = (mu if cfg.literal_mean else m) / bias_correction(cfg.beta1, t)[:, None]
    vc = v / bias_correction(cfg.beta2, t)[:, None]
    return _normalize(x_t, mean, vc, cfg, gamma, bias), NormState(m, v, t)


def tsn_step(x_t, state: NormState, cfg: NormConfig, gamma=None, bias=None):
    """One timestep of the cumulative-average baseline."""
    mu, var = group_stats(x_t, cfg.groups)
    Sm, Sv, t = state.m + mu, state.v + var, state.t + 1
    y = _normalize(x_t, Sm / t[:, None], Sv / t[:, None], cfg, gamma, bias)
    return y, NormState(Sm, Sv, t)


class TimestepNorm(nn.Module):
    def __init__(self, d: int, cfg: NormConfig, dtype=torch.float32):
        super().__init__()
        if d % cfg.groups:
            raise ValueError(f"dim {d} not divisible by {cfg.groups} groups")
        self.cfg = cfg
        self.weight = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, x, state: NormState | None = None, mask=None):
        return tsdn_batch(x, self.cfg, state, self.weight, self.bias, mask)
