import math

import pytest
import torch

from gecko.numerics import NonFiniteError
from gecko.optim import OptimConfig, lr_factor, make_optimizer, train_step


class Bowl(torch.nn.Module):
    def __init__(self, start):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(start, dtype=torch.float64))


def run(model, cfg, loss_fn, steps):
    opt, sched = make_optimizer(model, cfg)
    out = []
    for s in range(steps):
        out.append(train_step(model, opt, sched, loss_fn, s, cfg.clip))
    return out


def test_zero_lr_leaves_parameters():
    m = Bowl([[1.0, -2.0]])
    before = m.w.detach().clone()
    run(m, OptimConfig(lr=0.0, weight_decay=0.1), lambda: (m.w**2).sum(), 5)
    assert torch.equal(m.w, before)


def test_decay_only_shrinks_by_closed_form():
    m = Bowl([[1.0, -2.0], [3.0, 0.5]])
    before = m.w.detach().clone()
    cfg = OptimConfig(lr=0.1, weight_decay=0.2, warmup=0)
    run(m, cfg, lambda: (m.w * 0).sum(), 1)
    assert torch.allclose(m.w, before * (1 - 0.1 * 0.2), rtol=0, atol=1e-15)


def test_vectors_are_not_decayed():
    m = Bowl([1.0, 2.0])
    before = m.w.detach().clone()
    run(m, OptimConfig(lr=0.1, weight_decay=0.5, warmup=0), lambda: (m.w * 0).sum(), 3)
    assert torch.equal(m.w, before)


def test_quadratic_bowl_converges():
    target = torch.tensor([[0.3, -1.2], [2.0, 0.7]], dtype=torch.float64)
    m = Bowl([[0.0, 0.0], [0.0, 0.0]])
    cfg = OptimConfig(lr=0.05, weight_decay=0.0, warmup=10, total_steps=500, min_lr_ratio=0.0)
    run(m, cfg, lambda: ((m.w - target) ** 2).sum(), 500)
    assert (m.w - target).abs().max() < 1e-6


def test_schedule_shape():
    cfg = OptimConfig(warmup=10, total_steps=110, min_lr_ratio=0.1)
    assert lr_factor(0, cfg) == pytest.approx(0.1)
    assert lr_factor(9, cfg) == pytest.approx(1.0)
    assert lr_factor(60, cfg) == pytest.approx(0.55)
    assert lr_factor(110, cfg) == pytest.approx(0.1)


def test_clipping_limits_update_norm():
    m = Bowl([[0.0, 0.0]])
    r = run(m, OptimConfig(clip=1.0, warmup=0), lambda: (1e6 * m.w).sum(), 1)[0]
    assert r["grad_norm"] == pytest.approx(1e6 * math.sqrt(2))
    assert m.w.grad.norm().item() == pytest.approx(1.0)


def test_non_finite_loss_aborts_with_step():
    m = Bowl([[1.0]])
    opt, sched = make_optimizer(m, OptimConfig())
    with pytest.raises(NonFiniteError, match="step 7"):
        train_step(m, opt, sched, lambda: (m.w * float("nan")).sum(), 7)


def test_config_roundtrip():
    cfg = OptimConfig(betas=(0.8, 0.9))
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        OptimConfig.from_dict({"momentum": 0.9})
