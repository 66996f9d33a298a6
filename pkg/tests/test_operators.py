import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _problems import random_spd, seeded_problem
from dsbayes.operators import (
    GramMap,
    LinearMap,
    SpdMap,
    adjoint_mismatch,
    circulant_apply,
    estimate_norm,
    kronecker_apply,
    weighted_inner,
    weighted_norm,
)
from dsbayes.priors import KernelSpec, circulant_covariance, dense_covariance, kernel_eval, uniform_grid
from dsbayes.problems import deblur2d, fredholm1d


class TestWeightedInner:
    def test_identity(self):
        e1 = np.array([1.0, 0.0, 0.0])
        assert weighted_inner(SpdMap.identity(3), e1, e1) == 1.0

    def test_orthogonal_axes(self):
        B = SpdMap.from_diagonal([1.0, 2.0, 3.0])
        assert weighted_inner(B, np.eye(3)[0], np.eye(3)[1]) == 0.0

    def test_matches_triple_product(self, rng):
        S = random_spd(rng, 5)
        u, v = rng.standard_normal(5), rng.standard_normal(5)
        got = weighted_inner(SpdMap.from_dense(S), u, v)
        np.testing.assert_allclose(got, u @ S @ v, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            weighted_inner(SpdMap.identity(3), np.ones(2), np.ones(3))


class TestWeightedNorm:
    def test_pythagoras(self):
        assert weighted_norm(SpdMap.identity(2), np.array([3.0, 4.0])) == 5.0

    def test_zero(self):
        assert weighted_norm(SpdMap.identity(4), np.zeros(4)) == 0.0

    def test_matches_dense(self, rng):
        S = random_spd(rng, 6)
        u = rng.standard_normal(6)
        np.testing.assert_allclose(weighted_norm(SpdMap.from_dense(S), u), np.sqrt(u @ S @ u), rtol=1e-12)

    def test_negative_roundoff_clamped(self):
        B = SpdMap(2, lambda v: -1e-18 * v)
        assert weighted_norm(B, np.ones(2)) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            weighted_norm(SpdMap.identity(3), np.ones(4))


class TestKroneckerApply:
    def test_identity_factors(self, rng):
        v = rng.standard_normal(4)
        np.testing.assert_array_equal(kronecker_apply(np.eye(2), np.eye(2), v), v)

    def test_scalar_factors(self, rng):
        v = rng.standard_normal(9)
        np.testing.assert_allclose(kronecker_apply(2 * np.eye(3), 3 * np.eye(3), v), 6 * v)

    def test_matches_explicit_kron(self, rng):
        A, B, v = rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), rng.standard_normal(9)
        np.testing.assert_allclose(kronecker_apply(A, B, v), np.kron(A, B) @ v, atol=1e-12)

    def test_rectangular_factors_in_linear_map(self, rng):
        A, B = rng.standard_normal((2, 4)), rng.standard_normal((3, 5))
        K = LinearMap.kronecker(A, B)
        np.testing.assert_allclose(K.todense(), np.kron(A, B), atol=1e-12)
        assert adjoint_mismatch(K, rng) <= 1e-12

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            kronecker_apply(np.eye(2), np.eye(3), np.ones(5))


class TestCirculantApply:
    def test_delta_kernel_is_identity(self, rng):
        N = 5
        spectrum = np.ones((2 * N, 2 * N))  # DFT of a unit impulse
        v = rng.standard_normal(N * N)
        np.testing.assert_allclose(circulant_apply(spectrum, v), v, atol=1e-13)

    @pytest.mark.filterwarnings("ignore:circulant embedding spectrum is indefinite:RuntimeWarning")
    def test_matches_dense_matern(self, rng):
        n1 = 16
        spec = KernelSpec("matern", 1.0, 0.3, 2.5)
        prior = circulant_covariance(spec, n1)
        g = uniform_grid(n1)
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        S = dense_covariance(spec, pts).matrix
        v = rng.standard_normal(n1 * n1)
        got = circulant_apply(prior.spectrum, v)
        np.testing.assert_allclose(got, S @ v, rtol=1e-8, atol=1e-8 * np.linalg.norm(S @ v))

    def test_constant_input_interior(self):
        n1 = 12
        prior = circulant_covariance(KernelSpec("exponential", 1.0, 0.05), n1)
        out = prior.matvec(np.ones(n1 * n1)).reshape(n1, n1)
        # stationarity: interior rows see the same neighbourhood
        np.testing.assert_allclose(out[5, 5], out[6, 6], rtol=1e-12)

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            circulant_apply(np.ones((4, 4)), np.ones(5))
        with pytest.raises(ValueError):
            circulant_apply(np.ones((6, 6)), np.ones(4))


class TestLinearMap:
    def test_dense_roundtrip(self, rng):
        A = rng.standard_normal((4, 6))
        L = LinearMap.from_dense(A)
        np.testing.assert_array_equal(L.todense(), A)
        np.testing.assert_array_equal(L.T.todense(), A.T)
        assert L.shape == (4, 6)

    def test_pure_application(self, rng):
        L = LinearMap.from_dense(rng.standard_normal((3, 3)))
        v = rng.standard_normal(3)
        assert L.matvec(v).tobytes() == L.matvec(v).tobytes()

    def test_dimension_checks(self):
        L = LinearMap.from_dense(np.ones((2, 3)))
        with pytest.raises(ValueError):
            L.matvec(np.ones(2))
        with pytest.raises(ValueError):
            L.rmatvec(np.ones(3))
        with pytest.raises(ValueError):
            LinearMap(0, 1, lambda v: v, lambda v: v)

    @pytest.mark.parametrize(
        "op",
        [fredholm1d(40, 30, 10.0), fredholm1d(25, 25, 0.3), deblur2d(8, 4, 0.05), deblur2d(6, 6, 0.01)],
        ids=["fredholm-rect", "fredholm-square", "deblur-coarse", "deblur-square"],
    )
    def test_shipped_maps_are_adjoint_consistent(self, op):
        assert adjoint_mismatch(op, np.random.default_rng(1), trials=100) <= 1e-10


class TestSpdMap:
    def test_inverse(self, rng):
        S = SpdMap.from_dense(random_spd(rng, 8))
        u = rng.standard_normal(8)
        np.testing.assert_allclose(S.matvec(S.solve(u)), u, rtol=1e-8)

    def test_symmetry_and_semidefiniteness(self, rng):
        S = SpdMap.from_dense(random_spd(rng, 10))
        for _ in range(20):
            u, v = rng.standard_normal(10), rng.standard_normal(10)
            assert abs(S.matvec(u) @ v - u @ S.matvec(v)) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v)
            assert S.matvec(u) @ u >= -1e-12

    def test_from_spec_variants(self):
        assert SpdMap.from_spec(None, 3).matvec(np.ones(3)).tolist() == [1.0, 1.0, 1.0]
        np.testing.assert_array_equal(SpdMap.from_spec(2.0, 2).solve(np.ones(2)), [0.5, 0.5])
        np.testing.assert_array_equal(SpdMap.from_spec([1.0, 4.0], 2).solve(np.ones(2)), [1.0, 0.25])
        with pytest.raises(ValueError):
            SpdMap.from_spec([1.0, 2.0, 3.0], 2)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            SpdMap.from_diagonal([1.0, 0.0])
        with pytest.raises(ValueError):
            SpdMap.from_dense(-np.eye(2))
        with pytest.raises(ValueError):
            SpdMap.identity(2).solve(np.ones(3))
        with pytest.raises(ValueError):
            SpdMap(2, lambda v: v).solve(np.ones(2))


class TestGramMap:
    def test_matches_dense(self):
        for seed in range(5):
            inst, p = seeded_problem(seed, 120, 80, rank=None if seed % 2 else 50)
            M = GramMap(inst.forward, inst.prior)
            v = np.random.default_rng(seed).standard_normal(80)
            ref = p.G @ (p.Sigma @ (p.G.T @ v))
            np.testing.assert_allclose(M.apply(v), ref, rtol=1e-10, atol=1e-10 * np.linalg.norm(ref))

    def test_null_space_identity(self):
        inst, p = seeded_problem(3, 60, 40, rank=20)
        M = GramMap(inst.forward, inst.prior)
        _, s, Wt = np.linalg.svd(p.G.T)
        v = Wt[25]  # right singular vector of G^T with zero singular value
        scale = np.linalg.norm(p.G, 2)
        assert np.linalg.norm(M.apply(v)) <= 1e-10 * scale**2 * np.linalg.norm(p.Sigma, 2)
        assert np.linalg.norm(inst.forward.rmatvec(v)) <= 1e-5 * scale

    def test_energy_and_embedding(self, rng):
        inst, p = seeded_problem(4, 30, 20)
        M = GramMap(inst.forward, inst.prior)
        v = rng.standard_normal(20)
        Mv, energy = M.apply_with_energy(v)
        np.testing.assert_allclose(energy, v @ p.M @ v, rtol=1e-12)
        np.testing.assert_allclose(Mv, p.M @ v, rtol=1e-12, atol=1e-12 * np.linalg.norm(Mv))
        np.testing.assert_allclose(M.embed(v), p.Sigma @ p.G.T @ v, rtol=1e-12)
        np.testing.assert_allclose(M.todense(), p.M, rtol=1e-10, atol=1e-12 * np.abs(p.M).max())

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            GramMap(LinearMap.from_dense(np.ones((2, 3))), SpdMap.identity(4))


def test_estimate_norm(rng):
    S = random_spd(rng, 12, cond=50.0)
    np.testing.assert_allclose(estimate_norm(lambda x: S @ x, 12, rng, iters=200), np.linalg.norm(S, 2), rtol=1e-6)
    assert estimate_norm(lambda x: 0 * x, 3) == 0.0


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(1, 6),
    n=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_property_dense_maps_are_adjoint(m, n, seed):
    A = np.random.default_rng(seed).standard_normal((m, n))
    assert adjoint_mismatch(LinearMap.from_dense(A), np.random.default_rng(seed), trials=10) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(p=st.integers(1, 4), q=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_property_kronecker_matches_numpy(p, q, seed):
    g = np.random.default_rng(seed)
    A, B, v = g.standard_normal((p, p)), g.standard_normal((q, q)), g.standard_normal(p * q)
    np.testing.assert_allclose(kronecker_apply(A, B, v), np.kron(A, B) @ v, atol=1e-12 * (1 + np.abs(v).sum() * 10))


def test_kernel_eval_vectorized_matches_scalar():
    spec = KernelSpec("gaussian", 2.0, 0.5)
    r = np.array([0.0, 0.3, 1.0])
    np.testing.assert_allclose(kernel_eval(spec, r), [kernel_eval(spec, x) for x in r])
