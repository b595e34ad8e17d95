import torch
from hypothesis import given, settings, strategies as st

from gecko.scan import affine_combine, chunked_scan, inclusive_scan, local_scan, sequential_scan


def cplx(re, im):
    return torch.complex(torch.tensor(re, dtype=torch.float64), torch.tensor(im, dtype=torch.float64))


def test_hand_examples():
    q, p = affine_combine((torch.tensor(0.5), torch.tensor(0.0)), (torch.tensor(0.5), torch.tensor(1.0)))
    assert q.item() == 0.25 and p.item() == 0.5
    s = (torch.tensor(0.3), torch.tensor(-2.0))
    one = (torch.tensor(1.0), torch.tensor(0.0))
    assert affine_combine(s, one) == s
    assert affine_combine(one, s) == s


finite = st.floats(-2, 2, allow_nan=False)
pair = st.tuples(finite, finite, finite, finite)


@settings(max_examples=200, deadline=None)
@given(pair, pair, pair)
def test_associativity_complex(a, b, c):
    A = (cplx(a[0], a[1]), cplx(a[2], a[3]))
    B = (cplx(b[0], b[1]), cplx(b[2], b[3]))
    C = (cplx(c[0], c[1]), cplx(c[2], c[3]))
    left = affine_combine(affine_combine(C, B), A)
    right = affine_combine(C, affine_combine(B, A))
    for u, v in zip(left, right):
        assert abs(u - v) < 1e-14


def test_masked_step_forgets_state():
    q = torch.tensor([0.9, 0.0, 0.9], dtype=torch.float64)
    p = torch.tensor([5.0, 1.0, 0.0], dtype=torch.float64)
    h = sequential_scan(q, p, torch.tensor(100.0, dtype=torch.float64))
    assert h[1] == 1.0


def test_scans_agree(g):
    for n in (1, 2, 7, 32, 33, 100):
        q = torch.rand(3, n, dtype=torch.float64, generator=g)
        p = torch.randn(3, n, dtype=torch.float64, generator=g)
        h0 = torch.randn(3, dtype=torch.float64, generator=g)
        ref = sequential_scan(q, p, h0)
        Q, P = inclusive_scan(q, p)
        assert (P + Q * h0[:, None] - ref).abs().max() < 1e-12
        Q2, P2 = local_scan(q, p)
        assert (P2 + Q2 * h0[:, None] - ref).abs().max() < 1e-12
        for chunk in (1, 4, 32):
            h, starts = chunked_scan(q, p, h0, chunk)
            assert (h - ref).abs().max() < 1e-12
            assert starts.shape[-1] == -(-n // chunk)
