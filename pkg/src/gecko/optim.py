"""AdamW training step with global-norm clipping and warmup + cosine decay."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from .numerics import NonFiniteError


@dataclass
class OptimConfig:
    lr: float = 3e-3
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup: int = 50
    clip: float = 1.0
    total_steps: int = 2000
    min_lr_ratio: float = 0.1

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown optimizer fields: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def lr_factor(step: int, cfg: OptimConfig) -> float:
    """Multiplier on ``cfg.lr`` at ``step`` (0-based): linear warmup, cosine down."""
    if cfg.warmup and step < cfg.warmup:
        return (step + 1) / cfg.warmup
    span = max(1, cfg.total_steps - cfg.warmup)
    frac = min(1.0, (step - cfg.warmup) / span)
    return cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac))


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig):
    """AdamW with decay on matrices only, plus its LambdaLR schedule."""
    decay, no_decay = [], []
    for p in model.parameters():
        if p.requires_grad:
            (decay if p.dim() >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    opt = torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, cfg))
    return opt, sched


def train_step(model, opt, sched, loss_fn, step: int, clip: float = 1.0) -> dict:
    """One optimizer update. ``loss_fn()`` returns the scalar loss."""
    opt.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteError(f"step {step}: non-finite loss {loss.item()}")
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    gnorm = torch.nn.utils.clip_grad_norm_(params, clip) if clip else torch.tensor(0.0)
    if not torch.isfinite(gnorm):
        raise NonFiniteError(f"step {step}: non-finite gradient norm")
    lr = opt.param_groups[0]["lr"]
    opt.step()
    sched.step()
    return {"step": step, "loss": loss.item(), "grad_norm": float(gnorm), "lr": lr}
