import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from gecko.numerics import (NonFiniteError, ShapeError, count_macs, grad_check, matmul,
                            softmax)


def test_matmul_identity_and_zero():
    eye = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert torch.equal(matmul(eye, torch.tensor([[3.0], [4.0]])), torch.tensor([[3.0], [4.0]]))
    assert torch.equal(matmul(torch.tensor([[2.0]]), torch.tensor([[0.0]])), torch.tensor([[0.0]]))


def test_matmul_matches_triple_loop(g):
    a = torch.randn(5, 7, dtype=torch.float64, generator=g)
    b = torch.randn(7, 3, dtype=torch.float64, generator=g)
    ref = torch.zeros(5, 3, dtype=torch.float64)
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert (matmul(a, b) - ref).abs().max() < 1e-12


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        matmul(torch.ones(2, 3), torch.ones(4, 2))
    with pytest.raises(ShapeError):
        matmul(torch.ones(3), torch.ones(3, 2))


def test_mac_counter_counts_batched_products():
    with count_macs() as outer:
        matmul(torch.ones(4, 2, 3), torch.ones(3, 5))
        with count_macs() as inner:
            matmul(torch.ones(2, 3), torch.ones(3, 1))
    assert inner.count == 6
    assert outer.count == 4 * 2 * 3 * 5 + 6


def test_softmax_examples():
    assert torch.allclose(softmax(torch.zeros(2)), torch.tensor([0.5, 0.5]))
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    direct = torch.exp(x) / torch.exp(x).sum()
    assert (softmax(x) - direct).abs().max() < 1e-15


def test_softmax_handles_masked_and_huge():
    x = torch.tensor([[1e4, 1e4 - 1.0, float("-inf")]])
    y = softmax(x)
    assert torch.isfinite(y).all()
    assert y[0, 2] == 0
    assert abs(y.sum().item() - 1) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(xs, c):
    x = torch.tensor(xs, dtype=torch.float64)
    assert (softmax(x + c) - softmax(x)).abs().max() < 1e-12


def test_grad_check_quadratic():
    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: (x**2).sum(), [x], step=1e-5)
    assert report.passed
    assert report.max_error < 1e-7


def test_grad_check_constant():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (x * 0).sum() + 4.0, [x]).max_error == 0.0


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g * 0

    x = torch.tensor([1.5], dtype=torch.float64, requires_grad=True)
    assert not grad_check(lambda: Bad.apply(x).sum(), [x]).passed


def test_grad_check_reports_non_finite():
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NonFiniteError, match="param 0"):
        grad_check(lambda: torch.sqrt(x).sum(), [x])


def test_grad_check_requires_double():
    x = torch.ones(1, requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: x.sum(), [x])
