import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from irmemory.asymptotics import lambda0
from irmemory.numerics import (
    ConvergenceError,
    NoBracketError,
    QuadratureSpec,
    RngStream,
    brent_root,
    chi2_sf,
    fft_real,
    ifft_real,
    integrate,
    spd_solve,
)


class TestFFT:
    def test_delta_and_constant(self):
        np.testing.assert_allclose(fft_real([1, 0, 0, 0]), [1, 1, 1, 1])
        np.testing.assert_allclose(fft_real([1, 1, 1, 1]), [4, 0, 0, 0])

    def test_round_trip(self):
        x = np.random.default_rng(0).standard_normal(1024)
        assert np.max(np.abs(ifft_real(fft_real(x)) - x)) < 1e-10

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            fft_real(np.ones(6))

    @given(st.integers(1, 10), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_parseval(self, k, seed):
        x = np.random.default_rng(seed).standard_normal(2 ** k)
        X = fft_real(x)
        lhs = np.sum(x ** 2)
        rhs = np.sum(np.abs(X) ** 2) / x.size
        assert abs(lhs - rhs) <= 1e-9 * lhs


class TestIntegrate:
    def test_closed_forms(self):
        assert integrate(lambda x: np.sin(x / 2) ** 2, 0, math.pi) == pytest.approx(math.pi / 2, abs=1e-12)
        assert integrate(lambda x: np.sin(x / 2) ** 4, 0, math.pi) == pytest.approx(3 * math.pi / 8, abs=1e-12)

    def test_power_singularity(self):
        spec = QuadratureSpec(endpoint_singularity_exponent=-0.8)
        assert integrate(lambda x: x ** -0.8, 0, 1, spec) == pytest.approx(5.0, rel=1e-11)

    def test_deterministic(self):
        f = lambda x: np.exp(-x) * np.cos(7 * x)
        assert integrate(f, 0, 3) == integrate(f, 0, 3)

    def test_tighter_tolerance_never_worse(self):
        exact = 3 * math.pi / 8
        f = lambda x: np.sin(x / 2) ** 4
        errs = [abs(integrate(f, 0, math.pi, QuadratureSpec(abs_tol=t, rel_tol=t)) - exact)
                for t in (1e-4, 1e-8, 1e-12)]
        assert errs[2] <= errs[1] <= errs[0] + 1e-16

    def test_budget_exhaustion(self):
        with pytest.raises(ConvergenceError) as info:
            integrate(lambda x: np.sin(1 / x), 1e-9, 1, QuadratureSpec(max_subdivisions=20))
        assert math.isfinite(info.value.estimate)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            QuadratureSpec(abs_tol=0)
        with pytest.raises(ValueError):
            QuadratureSpec(endpoint_singularity_exponent=-1.0)


class TestBrent:
    def test_examples(self):
        assert brent_root(lambda x: x - 0.3, 0, 1) == pytest.approx(0.3, abs=1e-12)
        assert brent_root(lambda x: x ** 3, -1, 2) == pytest.approx(0.0, abs=1e-4)

    def test_lambda0_root(self):
        target = float(lambda0(0.0))
        assert brent_root(lambda d: lambda0(d) - target, -0.49, 1.49) == pytest.approx(0.0, abs=1e-11)

    def test_no_bracket(self):
        with pytest.raises(NoBracketError):
            brent_root(lambda x: x + 5, 0, 1)

    @given(st.floats(-0.9, 0.29), st.floats(0.31, 0.9))
    @settings(max_examples=40, deadline=None)
    def test_bracket_invariance(self, lo, hi):
        assert brent_root(lambda x: np.tanh(x - 0.3), lo, hi) == pytest.approx(0.3, abs=1e-11)


class TestSpdSolve:
    def test_examples(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(spd_solve(np.eye(3), b)[0], b)
        np.testing.assert_allclose(spd_solve(np.diag([2.0, 4.0]), [2.0, 4.0])[0], [1, 1])

    def test_random_residual(self):
        rng = np.random.default_rng(1)
        L = rng.standard_normal((10, 10))
        A = L @ L.T + 0.1 * np.eye(10)
        b = rng.standard_normal(10)
        x, jit = spd_solve(A, b)
        assert not jit
        assert np.max(np.abs(A @ x - b)) < 1e-8

    def test_jitter_on_singular(self):
        v = np.array([1.0, 1.0, 1.0])
        A = np.outer(v, v)
        x, jit = spd_solve(A, v)
        assert jit
        assert np.all(np.isfinite(x))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            spd_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), [1.0, 1.0])

    @given(st.integers(2, 8), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_cholesky_form(self, p, seed):
        rng = np.random.default_rng(seed)
        L = np.tril(rng.uniform(0.5, 1.5, (p, p)))
        A = L @ L.T
        x0 = rng.standard_normal(p)
        x, _ = spd_solve(A, A @ x0)
        assert np.max(np.abs(x - x0)) < 1e-8 * max(1.0, np.abs(x0).max())


class TestChi2:
    def test_examples(self):
        assert chi2_sf(0.0, 5) == 1.0
        for x in (0.1, 1.0, 7.5):
            assert chi2_sf(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-14)

    def test_tail_value_against_incomplete_gamma(self):
        # regularised upper incomplete gamma by its continued fraction
        x, k = 16.919, 9
        a = k / 2
        z = x / 2
        b, c, d = z + 1 - a, 1e300, 1 / (z + 1 - a)
        h = d
        for i in range(1, 200):
            an = -i * (i - a)
            b += 2
            d = 1 / (an * d + b)
            c = b + an / c
            h *= d * c
        cf = math.exp(-z + a * math.log(z) - math.lgamma(a)) * h
        assert chi2_sf(x, k) == pytest.approx(cf, rel=1e-10)
        assert chi2_sf(x, k) == pytest.approx(0.05, abs=5e-4)

    def test_matches_gammaincc(self):
        assert chi2_sf(3.3, 7) == pytest.approx(special.gammaincc(3.5, 1.65), rel=1e-13)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7, 3).normal(5)
        b = RngStream(7, 3).normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        assert not np.array_equal(RngStream(7, 0).normal(5), RngStream(7, 1).normal(5))

    def test_order_independent(self):
        first = [RngStream(11, r).uniform(3) for r in range(4)]
        second = [RngStream(11, r).uniform(3) for r in reversed(range(4))][::-1]
        for x, y in zip(first, second):
            np.testing.assert_array_equal(x, y)
