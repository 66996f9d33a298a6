"""Dense reference computations for desk-scale verification.

Everything here forms matrices explicitly and uses direct factorizations;
nothing is meant to scale.  These routines are the ground truth that the
matrix-free code is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .diagnostics import forstner_distance, kl_gaussian

__all__ = [
    "DenseProblem",
    "exact_posterior",
    "precision_form_posterior",
    "data_space_solve",
    "generalized_eig",
    "embed",
    "lis_posterior",
    "lis_posterior_cov",
    "exact_marginal_nll",
    "compressed_marginal_nll",
    "hat_H",
    "SqrtForm",
    "sqrt_form",
    "posterior_gap",
    "numerical_rank",
]


def _check_spd(S: np.ndarray, name: str) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square")
    S = 0.5 * (S + S.T)
    ev = np.linalg.eigvalsh(S) if S.size else np.zeros(0)
    if ev.size and ev.min() < -1e-10 * max(ev.max(), 0.0):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {ev.min():.3e})")
    return S


@dataclass(frozen=True)
class DenseProblem:
    """``y = G x + η`` with ``x ~ N(0, λ^{-1} Σ)`` and ``η ~ N(0, Γ)``, all dense."""

    G: np.ndarray
    Sigma: np.ndarray
    Gamma: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        m, n = G.shape
        Sigma = _check_spd(self.Sigma, "Sigma")
        Gamma = _check_spd(self.Gamma, "Gamma")
        y = np.asarray(self.y, dtype=float).ravel()
        if Sigma.shape != (n, n) or Gamma.shape != (m, m) or y.shape != (m,):
            raise ValueError("inconsistent dimensions")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "y", y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.G.shape

    @property
    def M(self) -> np.ndarray:
        GS = self.G @ self.Sigma
        M = GS @ self.G.T
        return 0.5 * (M + M.T)

    @property
    def H(self) -> np.ndarray:
        H = self.G.T @ np.linalg.solve(self.Gamma, self.G)
        return 0.5 * (H + H.T)

    @classmethod
    def from_instance(cls, inst) -> "DenseProblem":
        """Densify a :class:`~dsbayes.problems.ProblemInstance`."""
        return cls(inst.forward.todense(), inst.prior.dense(), inst.noise_cov.todense(), inst.y)


def exact_posterior(p: DenseProblem, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance through data-space solves (no ``Σ^{-1}``)."""
    if not lam > 0:
        raise ValueError("λ must be positive")
    SGt = p.Sigma @ p.G.T
    K = sla.cho_factor(p.M + lam * p.Gamma)
    mean = SGt @ sla.cho_solve(K, p.y)
    cov = (p.Sigma - SGt @ sla.cho_solve(K, SGt.T)) / lam
    return mean, 0.5 * (cov + cov.T)


def precision_form_posterior(p: DenseProblem, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """The same posterior as ``C = (H + λΣ^{-1})^{-1}``, ``x = C G^T Γ^{-1} y``; needs ``Σ`` invertible."""
    if not lam > 0:
        raise ValueError("λ must be positive")
    prec = p.H + lam * np.linalg.inv(p.Sigma)
    cov = np.linalg.inv(0.5 * (prec + prec.T))
    mean = cov @ (p.G.T @ np.linalg.solve(p.Gamma, p.y))
    return mean, 0.5 * (cov + cov.T)


def data_space_solve(p: DenseProblem, lam: float, check: bool = True, rng=None) -> np.ndarray:
    """``z_λ = (M + λΓ)^{-1} y``.

    With ``check`` the invariance of ``Σ G^T z`` under shifts of ``z`` by a
    random null vector of ``M`` is verified whenever ``M`` is singular.
    """
    if not lam > 0:
        raise ValueError("λ must be positive")
    z = sla.cho_solve(sla.cho_factor(p.M + lam * p.Gamma), p.y)
    if check:
        N = sla.null_space(p.G.T)
        if N.shape[1]:
            rng = np.random.default_rng(rng)
            shift = N @ rng.standard_normal(N.shape[1])
            x0 = p.Sigma @ (p.G.T @ z)
            x1 = p.Sigma @ (p.G.T @ (z + shift))
            if np.linalg.norm(x1 - x0) > 1e-8 * max(np.linalg.norm(x0), 1.0):
                raise AssertionError("Σ G^T z depends on the null-space representative")
    return z


def numerical_rank(values, rel: float = 1e-12) -> int:
    v = np.abs(np.asarray(values, dtype=float))
    return int(np.sum(v > rel * v.max())) if v.size else 0


def generalized_eig(p: DenseProblem, threshold: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero eigenpairs of ``M w = μ Γ w``, descending, scaled to ``w^T M w = 1``.

    The pencil is reduced with the Cholesky factor of ``Γ``.  Eigenvalues
    at or below ``threshold · μ_max`` are dropped.
    """
    R = np.linalg.cholesky(p.Gamma)
    Kr = sla.solve_triangular(R, sla.solve_triangular(R, p.M, lower=True).T, lower=True)
    mu, Q = np.linalg.eigh(0.5 * (Kr + Kr.T))
    order = np.argsort(mu)[::-1]
    mu, Q = mu[order], Q[:, order]
    if mu.size == 0 or mu[0] <= 0:
        return np.zeros(0), np.zeros((p.shape[0], 0))
    keep = mu > threshold * mu[0]
    mu, Q = mu[keep], Q[:, keep]
    W = sla.solve_triangular(R.T, Q, lower=False) / np.sqrt(mu)
    return mu, W


def embed(p: DenseProblem, u) -> np.ndarray:
    """The embedding ``[u] ↦ Σ G^T u``."""
    return p.Sigma @ (p.G.T @ np.asarray(u, dtype=float))


def lis_posterior(p: DenseProblem, r: int, lam: float, threshold: float = 1e-12):
    """Rank-``r`` likelihood-informed approximation.

    Returns ``(H_r, C_r)`` with ``H_r = G^T (Σ_i μ_i w_i w_i^T) G`` over the
    top ``r`` data-space eigenpairs and ``C_r = (H_r + λΣ^{-1})^{-1}``,
    evaluated without inverting ``Σ``.
    """
    mu, W = generalized_eig(p, threshold)
    if not 0 <= r <= mu.size:
        raise ValueError(f"rank {r} outside 0..{mu.size}")
    mu, W = mu[:r], W[:, :r]
    GtW = p.G.T @ W
    H_r = (GtW * mu) @ GtW.T
    return 0.5 * (H_r + H_r.T), lis_posterior_cov(p, mu, W, lam)


def lis_posterior_cov(p: DenseProblem, mu: np.ndarray, W: np.ndarray, lam: float) -> np.ndarray:
    """``λ^{-1}Σ - λ^{-1} Σ G^T W diag(μ/(λ+μ)) W^T G Σ``."""
    if not lam > 0:
        raise ValueError("λ must be positive")
    E = p.Sigma @ (p.G.T @ W)
    C = (p.Sigma - (E * (mu / (lam + mu))) @ E.T) / lam
    return 0.5 * (C + C.T)


def exact_marginal_nll(p: DenseProblem, lam: float) -> float:
    """``log det(Γ + λ^{-1}M) + y^T (Γ + λ^{-1}M)^{-1} y``."""
    if not lam > 0:
        raise ValueError("λ must be positive")
    c = sla.cho_factor(p.Gamma + p.M / lam)
    return float(2.0 * np.sum(np.log(np.diag(c[0]))) + p.y @ sla.cho_solve(c, p.y))


def compressed_marginal_nll(p: DenseProblem, U: np.ndarray, B: np.ndarray, lam: float) -> float:
    """Dense likelihood with ``M`` replaced by ``M_k = U B B^T U^T``, minus ``log det Γ``."""
    Mk = U @ B @ B.T @ U.T
    c = sla.cho_factor(p.Gamma + 0.5 * (Mk + Mk.T) / lam)
    logdet_gamma = 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(p.Gamma))))
    return float(2.0 * np.sum(np.log(np.diag(c[0]))) + p.y @ sla.cho_solve(c, p.y) - logdet_gamma)


def hat_H(p: DenseProblem, V: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``Ĥ_k = G^T V_k B_k^T B_k V_k^T G``."""
    Z = p.G.T @ V
    Hk = Z @ (B.T @ B) @ Z.T
    return 0.5 * (Hk + Hk.T)


@dataclass(frozen=True)
class SqrtForm:
    """A factor ``L`` with ``L L^T = Σ`` (negative eigenvalues clipped) and ``A = L^T H L``."""

    L: np.ndarray
    A: np.ndarray


def sqrt_form(p: DenseProblem) -> SqrtForm:
    ev, Q = np.linalg.eigh(p.Sigma)
    L = Q * np.sqrt(np.maximum(ev, 0.0))
    A = L.T @ p.H @ L
    return SqrtForm(L, 0.5 * (A + A.T))


def posterior_gap(
    p: DenseProblem,
    lam: float,
    V: np.ndarray,
    B: np.ndarray,
    xi: np.ndarray,
    sf: Optional[SqrtForm] = None,
) -> dict:
    """Exact distances between the true posterior and the Q-GKB approximation.

    Works in the coordinates ``x = L e`` where both precisions become
    ``λI + A`` and ``λI + Â_k``; the Förstner distance and the KL
    divergence are invariant under this change of variables, and it avoids
    inverting an ill-conditioned ``Σ``.

    Returns a dict with ``dF``, ``kl`` (``KL(approx || exact)``) and
    ``mean_err_sq`` (the ``C_λ^{-1}``-norm squared of the mean error).
    """
    sf = sf or sqrt_form(p)
    L, A = sf.L, sf.A
    n = A.shape[0]
    Z = L.T @ (p.G.T @ V)
    A_hat = Z @ (B.T @ B) @ Z.T
    A_hat = 0.5 * (A_hat + A_hat.T)
    P_exact = lam * np.eye(n) + A
    P_hat = lam * np.eye(n) + A_hat
    z = sla.cho_solve(sla.cho_factor(p.M + lam * p.Gamma), p.y)
    e = L.T @ (p.G.T @ z)
    e_hat = Z @ xi
    diff = e - e_hat
    C_exact = np.linalg.inv(P_exact)
    C_hat = np.linalg.inv(P_hat)
    return {
        "dF": forstner_distance(P_exact, P_hat),
        "kl": kl_gaussian(e_hat, C_hat, e, C_exact),
        "mean_err_sq": float(diff @ P_exact @ diff),
    }
