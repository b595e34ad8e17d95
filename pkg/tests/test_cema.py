import math

import pytest
import torch

from gecko.cema import Cema, CemaParams, cema_scan, cema_scan_full, cema_sequential, stability_bound
from gecko.numerics import grad_check

D64 = torch.float64


def random_params(d, h, g, requires_grad=False):
    p = CemaParams.from_values(
        0.1 + 0.8 * torch.rand(d, h, dtype=D64, generator=g),
        0.1 + 0.8 * torch.rand(d, h, dtype=D64, generator=g),
        torch.rand(d, dtype=D64, generator=g),
        torch.randn(d, h, dtype=D64, generator=g),
        torch.complex(torch.randn(d, h, dtype=D64, generator=g), torch.randn(d, h, dtype=D64, generator=g)),
    )
    if requires_grad:
        for t in (p.alpha, p.delta, p.theta, p.beta):
            t.requires_grad_(True)
    return p


def test_hand_recurrence():
    one = torch.ones(1, 1, dtype=D64)
    p = CemaParams(0.5 * one, one, 0 * one, one, torch.complex(one, 0 * one))
    x = torch.tensor([[[2.0], [0.0]]], dtype=D64)
    y, h = cema_sequential(x, p)
    assert y.flatten().tolist() == [1.0, 0.5]
    assert h.item() == 0.5
    y2, _, _ = cema_scan(x, p)
    assert y2.flatten().tolist() == [1.0, 0.5]


def test_zero_input_zero_output(g):
    p = random_params(3, 2, g)
    y, h, _ = cema_scan(torch.zeros(2, 5, 3, dtype=D64), p)
    assert y.abs().max() == 0 and h.abs().max() == 0


def test_multiplier_is_stable(g):
    m = Cema(4, 3, generator=g, dtype=D64)
    p = m.params()
    assert ((p.alpha > 0) & (p.alpha < 1) & (p.delta > 0) & (p.delta < 1)).all()
    assert (p.multiplier().abs() < 1).all()


@pytest.mark.parametrize("n", [1, 31, 32, 33, 64])
def test_scan_matches_sequential(n, g):
    p = random_params(3, 4, g)
    x = torch.randn(2, n, 3, dtype=D64, generator=g)
    h0 = torch.complex(torch.randn(2, 3, 4, dtype=D64, generator=g), torch.randn(2, 3, 4, dtype=D64, generator=g))
    mask = (torch.rand(2, n, generator=g) > 0.2).to(D64)
    y0, h_0 = cema_sequential(x, p, mask, h0)
    y1, h_1, starts = cema_scan(x, p, mask, h0, chunk=32)
    assert (y0 - y1).abs().max() < 1e-12
    assert (h_0 - h_1).abs().max() < 1e-12
    assert starts.shape[0] == math.ceil(n / 32)


def test_mask_resets_history(g):
    p = random_params(2, 3, g)
    x = torch.randn(1, 10, 2, dtype=D64, generator=g)
    mask = torch.ones(1, 10, dtype=D64)
    mask[0, 6] = 0
    y, _, _ = cema_scan(x, p, mask, chunk=4)
    x2 = x.clone()
    x2[0, :6] = 1e6
    y2, _, _ = cema_scan(x2, p, mask, chunk=4)
    assert (y[0, 6:] - y2[0, 6:]).abs().max() < 1e-12


def test_n1_is_one_step(g):
    p = random_params(2, 2, g)
    x = torch.randn(1, 1, 2, dtype=D64, generator=g)
    y, _, _ = cema_scan(x, p)
    ref = torch.einsum("dk,dk->d", p.alpha * p.beta * x[0, 0, :, None] + 0j, p.eta).real
    assert (y[0, 0] - ref).abs().max() < 1e-14


def _grads(fn, x, p, h0):
    leaves = [x, p.alpha, p.delta, p.theta, p.beta, p.eta, h0]
    y, hN = fn()
    loss = (y**2).sum() + (hN.abs() ** 2).sum()
    return torch.autograd.grad(loss, leaves)


def test_remat_backward_matches_full_storage(g):
    p = random_params(3, 4, g, requires_grad=True)
    p.eta.requires_grad_(True)
    x = torch.randn(2, 256, 3, dtype=D64, generator=g, requires_grad=True)
    h0 = torch.complex(torch.randn(2, 3, 4, dtype=D64, generator=g),
                       torch.randn(2, 3, 4, dtype=D64, generator=g)).requires_grad_(True)
    mask = (torch.rand(2, 256, generator=g) > 0.05).to(D64)
    full = _grads(lambda: cema_scan_full(x, p, mask, h0, 32), x, p, h0)
    remat = _grads(lambda: cema_scan(x, p, mask, h0, 32)[:2], x, p, h0)
    for a, b in zip(full, remat):
        assert (a - b).abs().max() < 1e-10


def test_zero_cotangent_gives_zero_grads(g):
    p = random_params(2, 2, g, requires_grad=True)
    x = torch.randn(1, 9, 2, dtype=D64, generator=g, requires_grad=True)
    y, _, _ = cema_scan(x, p, chunk=4)
    grads = torch.autograd.grad((y * 0).sum(), [x, p.alpha, p.delta, p.theta, p.beta])
    assert all(gr.abs().max() == 0 for gr in grads)


def test_grad_check_small(g):
    m = Cema(2, 2, chunk=5, generator=g, dtype=D64)
    x = torch.randn(1, 12, 2, dtype=D64, generator=g, requires_grad=True)
    report = grad_check(lambda: (m(x)[0] ** 2).sum(), [x, *m.parameters()])
    assert report.passed, report


def test_stability_bound(g):
    p = random_params(3, 2, g)
    x = 2 * torch.rand(1, 400, 3, dtype=D64, generator=g) - 1
    _, _, _ = cema_scan(x, p)
    hs = []
    h = torch.zeros(1, 3, 2, dtype=torch.complex128)
    for t in range(400):
        h = p.multiplier() * h + p.alpha * p.beta * x[:, t, :, None]
        hs.append(h.abs())
    assert (torch.stack(hs).amax(0)[0] <= stability_bound(p, 1.0) + 1e-12).all()


def test_shape_errors(g):
    p = random_params(3, 2, g)
    with pytest.raises(ValueError):
        cema_scan(torch.zeros(1, 4, 2, dtype=D64), p)
    with pytest.raises(ValueError):
        cema_scan(torch.zeros(1, 4, 3, dtype=D64), p, mask=torch.ones(1, 5))
