"""Dense tensor helpers shared by every layer.

Tensors are plain ``torch.Tensor`` objects. Reverse mode comes from torch
autograd except where a layer ships its own adjoint (see ``gecko.cema``).
This module adds the pieces torch does not give us directly: shape-checked
matmul with a multiply-add counter, a stabilized softmax, a central
finite-difference gradient checker and seeded generators.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MacCounter:
    def __init__(self):
        self.count = 0


_active_counters: list = []


@contextlib.contextmanager
def count_macs():
    """Count multiply-adds performed by ``matmul`` inside the block.

    >>> with count_macs() as c:
    ...     _ = matmul(torch.ones(2, 3), torch.ones(3, 4))
    >>> c.count
    24
    """
    c = MacCounter()
    _active_counters.append(c)
    try:
        yield c
    finally:
        _active_counters.remove(c)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a @ b`` with shape validation.

    Leading dimensions broadcast like ``torch.matmul``; the last two are
    the matrix dimensions.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    if _active_counters:
        batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        macs = math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for c in _active_counters:
            c.count += macs
    return torch.matmul(a, b)


def matmul_add_(acc: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """In-place ``acc += a @ b`` for 3-D batched matrices (fused, no temporary)."""
    if a.dim() != 3 or b.dim() != 3 or acc.dim() != 3:
        raise ShapeError("matmul_add_ works on (batch, m, k) x (batch, k, n) tensors")
    if a.shape[-1] != b.shape[-2] or acc.shape != a.shape[:-1] + b.shape[-1:]:
        raise ShapeError(f"matmul_add_ shapes differ: {tuple(acc.shape)} + {tuple(a.shape)} x {tuple(b.shape)}")
    if _active_counters:
        macs = math.prod(a.shape) * b.shape[-1]
        for c in _active_counters:
            c.count += macs
    return acc.baddbmm_(a, b)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax with max subtraction; ``-inf`` entries get zero weight."""
    m = x.amax(dim=dim, keepdim=True).detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(x - m)
    return e / e.sum(dim=dim, keepdim=True)


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@dataclass
class GradCheckReport:
    errors: list = field(default_factory=list)  # max relative error per parameter
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_error:.3e} (tol {self.tolerance:.0e})"


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    ``params`` are leaf tensors that ``f`` closes over; they are perturbed
    in place and restored. Relative error is ``|a - n| / max(|a|, |n|, floor)``
    so that entries whose true gradient is zero are compared absolutely.
    """
    for p in params:
        if p.dtype not in (torch.float64, torch.complex128):
            raise TypeError("grad_check runs in float64")
    params = list(params)
    for p in params:
        p.grad = None
    with torch.enable_grad():
        out = f()
        analytic = torch.autograd.grad(out, params, allow_unused=True)
    report = GradCheckReport(tolerance=tolerance)
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, analytic)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            worst = 0.0
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                fp = f().item()
                flat[j] = orig - step
                fm = f().item()
                flat[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"f is non-finite when perturbing param {i} entry {j}")
                num = (fp - fm) / (2 * step)
                a = gflat[j].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            report.errors.append(worst)
    return report
