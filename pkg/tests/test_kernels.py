"""Backend parity: the compiled kernels must agree with the pure numpy
reference (to rounding for float math, bit-for-bit for the assignment
solver)."""

import itertools

import numpy as np
import pytest

from vlalign import kernels
from vlalign.kernels import pure

try:
    from vlalign.kernels import _fast
except ImportError:
    _fast = None

needs_compiled = pytest.mark.skipif(_fast is None, reason="compiled kernels not built")

RNG = np.random.default_rng(99)

TOL = {np.float32: dict(rtol=1e-5, atol=1e-6), np.float64: dict(rtol=1e-12, atol=1e-13)}


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
class TestParity:
    def test_gelu(self, dtype):
        x = RNG.standard_normal((8, 11)).astype(dtype)
        gy = RNG.standard_normal((8, 11)).astype(dtype)
        assert np.allclose(_fast.gelu_fwd(x), pure.gelu_fwd(x), **TOL[dtype])
        assert np.allclose(_fast.gelu_bwd(x, gy), pure.gelu_bwd(x, gy), **TOL[dtype])

    def test_layernorm(self, dtype):
        x = (RNG.standard_normal((8, 16)) * 2 + 1).astype(dtype)
        gy = RNG.standard_normal((8, 16)).astype(dtype)
        xh1, m1, r1 = _fast.layernorm_fwd(x, 1e-5)
        xh2, m2, r2 = pure.layernorm_fwd(x, 1e-5)
        assert np.allclose(xh1, xh2, **TOL[dtype])
        assert np.allclose(m1, m2, **TOL[dtype]) and np.allclose(r1, r2, **TOL[dtype])
        tol = dict(rtol=1e-4, atol=1e-5) if dtype == np.float32 else TOL[dtype]
        assert np.allclose(_fast.layernorm_bwd(gy, xh1, r1), pure.layernorm_bwd(gy, xh2, r2), **tol)

    def test_softmax(self, dtype):
        x = (RNG.standard_normal((8, 13)) * 4).astype(dtype)
        gy = RNG.standard_normal((8, 13)).astype(dtype)
        p1, p2 = _fast.softmax_fwd(x), pure.softmax_fwd(x)
        assert np.allclose(p1, p2, **TOL[dtype])
        assert np.allclose(_fast.softmax_bwd(p1, gy), pure.softmax_bwd(p2, gy), **TOL[dtype])

    def test_adamw(self, dtype):
        p1 = RNG.standard_normal(32).astype(dtype)
        p2 = p1.copy()
        g = RNG.standard_normal(32).astype(dtype)
        m1 = np.zeros_like(p1); v1 = np.zeros_like(p1)
        m2 = np.zeros_like(p2); v2 = np.zeros_like(p2)
        for step in (1, 2, 3):
            _fast.adamw_update(p1, g, m1, v1, step, 1e-3, 0.9, 0.999, 1e-8, 0.01)
            pure.adamw_update(p2, g, m2, v2, step, 1e-3, 0.9, 0.999, 1e-8, 0.01)
        assert np.allclose(p1, p2, **TOL[dtype])
        assert np.allclose(v1, v2, **TOL[dtype])


@needs_compiled
def test_lap_min_bit_identical_across_backends():
    for n in range(1, 10):
        for _ in range(40):
            cost = RNG.random((n, n))
            assert np.array_equal(_fast.lap_min(cost), pure.lap_min(cost))


def brute_force_cost(cost: np.ndarray) -> float:
    n = cost.shape[0]
    return min(cost[np.arange(n), perm].sum() for perm in itertools.permutations(range(n)))


def test_lap_min_matches_brute_force():
    for n in range(1, 8):
        for _ in range(25):
            cost = RNG.random((n, n))
            perm = kernels.lap_min(cost)
            assert sorted(perm) == list(range(n))
            assert cost[np.arange(n), perm].sum() == pytest.approx(brute_force_cost(cost), abs=1e-12)


def test_active_backend_is_exported():
    assert kernels.BACKEND in ("pure", "compiled")
    assert kernels.gelu_fwd is not None
