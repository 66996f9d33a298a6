import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsbayes.priors import (
    JITTER_LADDER,
    KernelSpec,
    circulant_covariance,
    dense_covariance,
    kernel_eval,
    separable_covariance,
    uniform_grid,
)


class TestKernelEval:
    @pytest.mark.parametrize(
        "spec",
        [KernelSpec("gaussian", 2.5, 0.3), KernelSpec("exponential", 0.7, 2.0),
         KernelSpec("matern", 1.3, 0.2, 1.5), KernelSpec("matern", 1.3, 0.2, 3.0)],
        ids=["gaussian", "exponential", "matern-3/2", "matern-3"],
    )
    def test_zero_distance_is_variance(self, spec):
        assert kernel_eval(spec, 0.0) == pytest.approx(spec.variance, rel=1e-14)

    def test_matern_half_is_exponential(self):
        np.testing.assert_allclose(kernel_eval(KernelSpec("matern", 1.0, 1.0, 0.5), 1.0), math.exp(-1.0), rtol=1e-14)

    def test_family_formulas(self):
        assert kernel_eval(KernelSpec("gaussian", 1.0, 2.0), 2.0) == pytest.approx(math.exp(-0.5))
        assert kernel_eval(KernelSpec("exponential", 3.0, 0.5), 1.0) == pytest.approx(3 * math.exp(-2.0))

    def test_matern_integer_matches_scipy(self):
        from scipy.special import gamma, kv

        nu, rho = 3.0, 0.4
        r = np.linspace(0.01, 2.0, 50)
        x = math.sqrt(2 * nu) * r / rho
        ref = 2 ** (1 - nu) / gamma(nu) * x**nu * kv(nu, x)
        np.testing.assert_allclose(kernel_eval(KernelSpec("matern", 1.0, rho, nu), r), ref, rtol=1e-12)

    def test_matern_five_halves_closed_form(self):
        r, rho = 0.37, 0.3
        x = math.sqrt(5) * r / rho
        ref = (1 + x + x * x / 3) * math.exp(-x)
        assert kernel_eval(KernelSpec("matern", 1.0, rho, 2.5), r) == pytest.approx(ref, rel=1e-13)

    def test_matern_nu3_grid_is_spd(self):
        g = uniform_grid(64)
        S = kernel_eval(KernelSpec("matern", 1.0, 0.1, 3.0), np.abs(g[:, None] - g[None, :]))
        assert np.linalg.eigvalsh(S).min() >= -1e-10

    def test_monotone_in_distance(self):
        r = np.linspace(0, 5, 200)
        for spec in (KernelSpec("gaussian"), KernelSpec("exponential"), KernelSpec("matern", nu=2.5)):
            assert np.all(np.diff(kernel_eval(spec, r)) <= 1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            KernelSpec("matern", 1.0, 1.0, 0.7)
        with pytest.raises(ValueError):
            KernelSpec("matern", 1.0, 1.0)
        with pytest.raises(ValueError):
            KernelSpec("cauchy")
        with pytest.raises(ValueError):
            KernelSpec("gaussian", -1.0)
        with pytest.raises(ValueError):
            KernelSpec("gaussian", nu=1.0)
        with pytest.raises(ValueError):
            kernel_eval(KernelSpec("gaussian"), -0.1)


class TestDenseCovariance:
    def test_single_point(self):
        P = dense_covariance(KernelSpec("gaussian", 2.0, 1.0), [0.3])
        np.testing.assert_array_equal(P.dense(), [[2.0]])
        assert P.jitter == 0.0

    def test_duplicate_points_need_jitter(self):
        P = dense_covariance(KernelSpec("gaussian", 1.0, 1.0), [0.5, 0.5])
        np.testing.assert_array_equal(P.dense(), np.ones((2, 2)))
        assert P.jitter in JITTER_LADDER[1:]

    def test_matches_direct_evaluation(self):
        spec = KernelSpec("gaussian", 1.0, 0.4)
        g = uniform_grid(50, -math.pi / 2, math.pi / 2)
        P = dense_covariance(spec, g)
        ref = np.exp(-((g[:, None] - g[None, :]) ** 2) / (2 * 0.4**2))
        np.testing.assert_allclose(P.dense(), ref, rtol=1e-14)
        np.testing.assert_array_equal(P.diagonal, np.ones(50))

    def test_inverse_apply(self, rng):
        P = dense_covariance(KernelSpec("matern", 1.0, 0.2, 1.5), uniform_grid(40))
        u = rng.standard_normal(40)
        np.testing.assert_allclose(P.matvec(P.solve(u)), u, rtol=1e-7, atol=1e-7 * np.linalg.norm(u))

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            dense_covariance(KernelSpec("gaussian"), [])


class TestSeparableCovariance:
    def test_single_point(self):
        P = separable_covariance(KernelSpec("exponential", 3.0, 1.0), [0.0])
        np.testing.assert_allclose(P.dense(), [[9.0]])

    def test_matches_kron_column(self):
        spec = KernelSpec("matern", 1.5, 0.3, 2.5)
        g = uniform_grid(4)
        P = separable_covariance(spec, g)
        S1 = kernel_eval(spec, np.abs(g[:, None] - g[None, :]))
        e1 = np.zeros(16)
        e1[0] = 1.0
        np.testing.assert_allclose(P.matvec(e1), np.kron(S1, S1)[:, 0], rtol=1e-13)

    def test_diagonal_is_sigma_fourth(self):
        P = separable_covariance(KernelSpec("gaussian", 1.7, 0.2), uniform_grid(6))
        np.testing.assert_allclose(P.diagonal, np.full(36, 1.7**2))

    def test_agrees_with_circulant(self, rng):
        # in the delta limit both constructions reduce to σ² I
        n1 = 6
        spec = KernelSpec("gaussian", 1.0, 1e-6)
        sep = separable_covariance(spec, uniform_grid(n1))
        circ = circulant_covariance(spec, n1)
        v = rng.standard_normal(n1 * n1)
        np.testing.assert_allclose(sep.matvec(v), circ.matvec(v), atol=1e-10)

    @pytest.mark.filterwarnings("ignore:circulant embedding spectrum is indefinite:RuntimeWarning")
    def test_gaussian_separable_equals_dense_2d(self, rng):
        # a squared-exponential kernel factorizes across axes
        n1 = 7
        spec = KernelSpec("gaussian", 1.0, 0.25)
        g = uniform_grid(n1)
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        dense = dense_covariance(spec, pts)
        sep = separable_covariance(spec, g)
        circ = circulant_covariance(spec, n1)
        v = rng.standard_normal(n1 * n1)
        ref = dense.matvec(v)
        np.testing.assert_allclose(sep.matvec(v), ref, rtol=1e-8, atol=1e-8 * np.linalg.norm(ref))
        np.testing.assert_allclose(circ.matvec(v), ref, rtol=1e-8, atol=1e-8 * np.linalg.norm(ref))


class TestCirculantCovariance:
    def test_delta_kernel_is_identity(self, rng):
        P = circulant_covariance(KernelSpec("exponential", 1.0, 1e-9), 5)
        v = rng.standard_normal(25)
        np.testing.assert_allclose(P.matvec(v), v, atol=1e-12)

    @pytest.mark.filterwarnings("ignore:circulant embedding spectrum is indefinite:RuntimeWarning")
    def test_peak_at_first_index(self):
        P = circulant_covariance(KernelSpec("matern", 2.0, 0.3, 2.5), 8)
        e1 = np.zeros(64)
        e1[0] = 1.0
        out = P.matvec(e1)
        assert int(np.argmax(out)) == 0
        assert out[0] == pytest.approx(2.0, rel=1e-12)
        np.testing.assert_array_equal(P.diagonal, np.full(64, 2.0))

    def test_indefinite_spectrum_warns_but_stays_exact(self, rng):
        spec = KernelSpec("gaussian", 1.0, 0.6)
        with pytest.warns(RuntimeWarning, match="indefinite"):
            P = circulant_covariance(spec, 8)
        g = uniform_grid(8)
        X, Y = np.meshgrid(g, g, indexing="ij")
        S = dense_covariance(spec, np.column_stack([X.ravel(), Y.ravel()])).matrix
        v = rng.standard_normal(64)
        np.testing.assert_allclose(P.matvec(v), S @ v, atol=1e-10 * np.linalg.norm(S @ v))
        assert P.spectrum_min_ratio < 0

    def test_no_sampling_factor(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            P = circulant_covariance(KernelSpec("exponential", 1.0, 0.1), 4)
        with pytest.raises(ValueError):
            P.sqrt_apply(np.ones(16))


def test_uniform_grid():
    np.testing.assert_allclose(uniform_grid(4), [0.125, 0.375, 0.625, 0.875])
    with pytest.raises(ValueError):
        uniform_grid(0)


@settings(max_examples=30, deadline=None)
@given(
    family=st.sampled_from(["gaussian", "exponential", "matern"]),
    nu=st.sampled_from([0.5, 1.0, 1.5, 2.0, 2.5, 3.0]),
    var=st.floats(0.1, 10.0),
    length=st.floats(0.05, 2.0),
    r=st.floats(0.0, 5.0),
)
def test_property_kernel_bounded_by_variance(family, nu, var, length, r):
    spec = KernelSpec(family, var, length, nu if family == "matern" else None)
    val = kernel_eval(spec, r)
    assert -1e-14 <= val <= var * (1 + 1e-12)
