import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irmemory.asymptotics import (
    FbmSecondDifferenceKernel,
    McSpec,
    TableError,
    _graded_unit,
    build_table,
    default_table,
    gamma_matrix,
    interpolate,
    lag_rule,
    lam,
    lam_prime,
    lambda0,
    lambda0_inv,
    lambda0_inv_checked,
    lambda0_prime,
    load_table,
    non_pd_points,
    psd_floor,
    refine_table,
    rho,
    rho_prime,
    save_table,
    sigma2_one_sided,
    z_cov,
)


def _rho_direct(d):
    H = d + 0.5
    return (4 ** (H + 1) - 9 ** H - 7) / (2 * (4 - 4 ** H))


class TestLambda:
    def test_values(self):
        assert lam(0.0) == pytest.approx(0.5 + math.log(2) / math.pi, abs=1e-12)
        assert lam(-0.5) == pytest.approx(1 / 3 + 2 * math.log(2) / (math.sqrt(3) * math.pi), abs=1e-12)

    def test_limits(self):
        assert abs(lam(1 - 1e-8) - 1) < 1e-3
        assert abs(lam(-1 + 1e-8)) < 1e-3

    def test_domain(self):
        with pytest.raises(ValueError):
            lam(1.0)

    @given(st.floats(-0.99, 0.99))
    @settings(max_examples=50, deadline=None)
    def test_derivative(self, r):
        h = 1e-6
        fd = (lam(r + h) - lam(r - h)) / (2 * h)
        assert lam_prime(r) == pytest.approx(fd, rel=1e-5)


class TestRho:
    def test_exact_values(self):
        assert rho(0.0) == -0.5
        assert rho(-0.5) == pytest.approx(-2 / 3, abs=1e-15)

    def test_removable_point(self):
        target = (16 * math.log(4) - 9 * math.log(9)) / (-8 * math.log(4))
        assert rho(0.5) == pytest.approx(target, abs=1e-14)
        assert rho(0.5 + 1e-6) == pytest.approx(target, abs=1e-6)
        assert rho(0.5 - 1e-6) == pytest.approx(target, abs=1e-6)

    @pytest.mark.parametrize("d", [-0.45, -0.2, 0.1, 0.3, 0.7, 1.2, 1.45])
    def test_matches_direct_formula(self, d):
        assert rho(d) == pytest.approx(_rho_direct(d), abs=1e-12)

    @pytest.mark.parametrize("d", np.linspace(-0.45, 1.45, 12))
    def test_derivative(self, d):
        h = 1e-6
        assert rho_prime(d) == pytest.approx((rho(d + h) - rho(d - h)) / (2 * h), rel=1e-6)

    def test_domain(self):
        with pytest.raises(ValueError):
            rho(1.6)


class TestLambda0:
    def test_white_noise(self):
        assert lambda0(0.0) == pytest.approx(lam(-0.5), abs=1e-15)

    def test_round_trip(self):
        assert lambda0_inv(lambda0(0.2)) == pytest.approx(0.2, abs=1e-9)

    @pytest.mark.parametrize("d", np.round(np.arange(-0.4, 1.41, 0.2), 2))
    def test_derivative(self, d):
        h = 1e-5
        fd = (lambda0(d + h) - lambda0(d - h)) / (2 * h)
        assert abs(lambda0_prime(d) - fd) / abs(fd) < 1e-5

    def test_monotone_with_floor(self):
        d = np.round(np.arange(-0.49, 1.4901, 0.01), 10)
        v = lambda0(d)
        assert np.all(np.diff(v) > 0)
        assert np.all(lambda0_prime(d) > 0.05)

    def test_clamping(self):
        d, out = lambda0_inv_checked(1.0)
        assert d == 1.49 and out
        d, out = lambda0_inv_checked(0.0)
        assert d == -0.49 and out
        with pytest.raises(ValueError):
            lambda0_inv(1.0, clamp=False)

    @given(st.floats(-0.48, 1.48))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, d):
        assert lambda0_inv(lambda0(d)) == pytest.approx(d, abs=1e-9)


class TestZCov:
    def test_unit_variance(self):
        for d in (-0.4, 0.0, 0.4):
            assert z_cov(FbmSecondDifferenceKernel(d), 0.0, 0.0) == pytest.approx(1.0, abs=1e-14)

    def test_scale_variance(self):
        k = FbmSecondDifferenceKernel(0.3, 3, 3)
        assert z_cov(k, 0.0, 0.0) == pytest.approx(3 ** (2 * 0.8), rel=1e-13)

    @pytest.mark.parametrize("d", [-0.4, 0.0, 0.4])
    def test_lag_one_is_rho(self, d):
        k = FbmSecondDifferenceKernel(d)
        corr = z_cov(k, 1.0, 0.0) / z_cov(k, 0.0, 0.0)
        assert corr == pytest.approx(rho(d), abs=1e-10)

    def test_decay(self):
        assert abs(z_cov(FbmSecondDifferenceKernel(0.0), 50.0, 0.0)) < 1e-3

    def test_symmetric(self):
        k = FbmSecondDifferenceKernel(0.2, 2, 2)
        assert z_cov(k, 3.3, 0.0) == pytest.approx(z_cov(k, 0.0, 3.3), abs=1e-14)


class TestLagRule:
    def test_integrates_smooth_function(self):
        # the residual is the trapezoid end term h^2/12 f' at the two junctions
        exact = math.sqrt(math.pi / 0.01)
        t, w = lag_rule(2, 3, McSpec())
        assert abs(np.dot(w, np.exp(-0.01 * t ** 2)) - exact) / exact < 1e-4

    def test_graded_unit_order(self):
        errs = []
        for k in (16, 32, 64):
            x, w = _graded_unit(k)
            errs.append(abs(np.dot(w, np.exp(x)) - (math.e - 1)))
        assert errs[1] < errs[0] / 8 and errs[2] < errs[1] / 8

    def test_handles_integer_cusps(self):
        # |tau|^0.3 style cusps at the integers of the overlap region
        spec = McSpec()
        t, w = lag_rule(1, 1, spec)
        inside = (t >= -4) & (t <= 4)
        g = np.abs(np.sin(math.pi * t)) ** 0.3
        exact = 8 * 2 * 0.5 * math.gamma(0.65) * math.gamma(0.5) / math.gamma(1.15) / math.pi
        assert np.dot(w[inside], g[inside]) == pytest.approx(exact, rel=2e-3)

    def test_one_sided_needs_diagonal(self):
        with pytest.raises(ValueError):
            lag_rule(1, 2, McSpec(), one_sided=True)


class TestMcSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            McSpec(mc_samples=1000)
        with pytest.raises(ValueError):
            McSpec(tau_step=0.3)
        with pytest.raises(ValueError):
            McSpec(n_scrambles=1)


class TestGamma:
    def test_symmetric_and_deterministic(self):
        spec = McSpec(mc_samples=2 ** 12, n_scrambles=4)
        a = gamma_matrix(0.1, 4, spec)
        b = gamma_matrix(0.1, 4, spec)
        np.testing.assert_array_equal(a, a.T)
        np.testing.assert_array_equal(a, b)

    def test_scaling_relation(self):
        spec = McSpec(mc_samples=2 ** 12, n_scrambles=4)
        g = gamma_matrix(-0.2, 4, spec)
        assert g[1, 1] == 2 * g[0, 0]
        assert g[3, 3] == 4 * g[0, 0]
        assert g[1, 3] == 2 * g[0, 1]

    def test_leading_block_is_p_independent(self):
        spec = McSpec(mc_samples=2 ** 12, n_scrambles=4)
        np.testing.assert_array_equal(gamma_matrix(0.3, 5, spec)[:3, :3], gamma_matrix(0.3, 3, spec))

    @pytest.mark.parametrize("d", [-0.3, 0.0, 0.3])
    def test_two_routes_agree(self, d):
        spec = McSpec()
        g = gamma_matrix(d, 1, spec, full=True)
        s2, se = sigma2_one_sided(d, spec)
        pooled = math.hypot(float(g.stderr[0, 0]), se)
        assert abs(g.matrix[0, 0] - s2) < 2 * pooled

    def test_doubling_samples(self):
        a = gamma_matrix(0.2, 3, McSpec(mc_samples=2 ** 14), full=True)
        b = gamma_matrix(0.2, 3, McSpec(mc_samples=2 ** 15, seed=99), full=True)
        pooled = np.hypot(a.stderr, b.stderr)
        assert np.all(np.abs(a.matrix - b.matrix) < 3 * pooled)

    def test_domain(self):
        with pytest.raises(ValueError):
            gamma_matrix(0.5, 2)


class TestPsdFloor:
    def test_definite_unchanged(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        out, repaired = psd_floor(A)
        assert out is A and not repaired

    def test_lifts_negative_direction(self):
        A = np.diag([3.0, 1.0, -0.2])
        out, repaired = psd_floor(A)
        assert repaired
        np.testing.assert_allclose(np.linalg.eigvalsh(out), [1.0, 1.0, 3.0], atol=1e-12)


class TestTable:
    @pytest.fixture(scope="class")
    @classmethod
    def tiny(cls):
        return build_table(3, 0.245, McSpec(mc_samples=2 ** 10, n_scrambles=4))

    def test_grid_values_exact(self, tiny):
        k = 3
        d = float(tiny.gamma_d_grid[k])
        l0, l0p, g = interpolate(tiny, d)
        np.testing.assert_array_equal(g, tiny.gamma_p[k])
        assert l0 == pytest.approx(tiny.lambda0[np.argmin(np.abs(tiny.d_grid - d))], abs=1e-15)

    def test_round_trip(self, tiny, tmp_path):
        f = tmp_path / "t.npz"
        save_table(tiny, f)
        back = load_table(f)
        for name in ("d_grid", "lambda0", "lambda0_prime", "gamma_d_grid", "gamma_p",
                     "gamma_stderr", "gamma_tail", "gamma_samples"):
            np.testing.assert_array_equal(getattr(back, name), getattr(tiny, name))
        assert back.mc == tiny.mc and back.p == tiny.p

    def test_checksum(self, tiny, tmp_path):
        f = tmp_path / "t.npz"
        save_table(tiny, f)
        with np.load(f) as z:
            arrays = {k: z[k] for k in z.files}
        arrays["gamma_p"] = arrays["gamma_p"] * (1 + 1e-12)
        np.savez(f, **arrays)
        with pytest.raises(TableError, match="checksum"):
            load_table(f)

    def test_restrict_and_bounds(self, tiny):
        assert tiny.restrict(2).gamma(0.0).shape == (2, 2)
        with pytest.raises(TableError):
            tiny.gamma(0.0, 4)
        with pytest.raises(ValueError):
            tiny.gamma(0.6)

    def test_psd_lookup_moves_inward(self, tiny):
        g = tiny.gamma_p.copy()
        g[0] = -np.eye(3)
        broken = dataclasses.replace(tiny, gamma_p=g)
        out, repaired = broken.gamma_psd(-0.49)
        assert repaired
        np.testing.assert_allclose(out, psd_floor(tiny.gamma_p[1])[0])

    def test_refine_non_pd_points(self, tiny):
        g = tiny.gamma_p.copy()
        g[2] = -np.eye(3)
        broken = dataclasses.replace(tiny, gamma_p=g)
        todo = sorted(set(non_pd_points(tiny)) | {2})
        np.testing.assert_array_equal(non_pd_points(broken), todo)
        spec = McSpec(mc_samples=2 ** 11, n_scrambles=4)
        fixed = refine_table(broken, spec)
        expected = np.full(5, 1024.0)
        expected[todo] = 2048
        np.testing.assert_array_equal(fixed.gamma_samples, expected)
        np.testing.assert_array_equal(fixed.gamma_p[2], gamma_matrix(float(tiny.gamma_d_grid[2]), 3, spec))
        np.testing.assert_array_equal(fixed.gamma_p[3], tiny.gamma_p[3])

    def test_missing_default(self, monkeypatch, tmp_path):
        monkeypatch.setenv("IRMEMORY_TABLE", str(tmp_path / "none.npz"))
        with pytest.raises(TableError, match="build-table"):
            default_table()


class TestShippedTable:
    def test_header(self):
        t = default_table()
        assert t.p == 20
        assert t.gamma_d_grid[0] == -0.49 and t.gamma_d_grid[-1] == 0.49
        assert t.gamma_d_grid.size == 99

    def test_off_grid_interpolation(self):
        t = default_table()
        direct = gamma_matrix(0.123, 4, t.mc, full=True)
        k = int(np.argmin(np.abs(t.gamma_d_grid - 0.123)))
        se = np.hypot(direct.stderr, t.gamma_stderr[k, :4, :4])
        assert np.all(np.abs(t.gamma(0.123, 4) - direct.matrix) < 3 * se)
