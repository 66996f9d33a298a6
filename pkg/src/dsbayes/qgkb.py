"""Golub-Kahan bidiagonalization on the quotient data space.

The recursion works with representatives ``v_i`` of quotient vectors, so it
needs only products with ``M = G Σ G^T`` and with ``Γ^{-1}``:

    β_1 u_1 = y
    α_i v_i = Γ^{-1} u_i - β_i v_{i-1}
    β_{i+1} u_{i+1} = M v_i - α_i u_i

``u_i`` are Γ^{-1}-orthonormal, ``v_i`` are M-orthonormal.  Alongside each
representative ``v_i`` the state carries ``w_i = G^T v_i`` and ``Σ w_i``, and
every M inner product is evaluated as a Σ inner product of these.  When
``M`` is singular the representatives may pick up large null-space
components; working with ``w_i`` keeps the recursion insensitive to them.
One product each with ``G^T``, ``Σ`` and ``G`` is spent per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .operators import GramMap, SpdMap

__all__ = ["QgkbState", "BidiagonalMatrix", "qgkb_init", "qgkb_step", "bidiagonal", "BREAKDOWN_TOL", "BREAKDOWN_RTOL"]

#: normalizers below this fraction of the first normalizer of their kind count as zero
BREAKDOWN_TOL = 1e-12

#: α below this fraction of ``||Γ^{-1} u||_M`` counts as zero; this sits
#: above the floor left by round-off in the out-of-range part of ``w``
BREAKDOWN_RTOL = 1e-8

# exact orthogonality gives ||Γ^{-1} u_{k+1}||_M² = α_{k+1}² + β_{k+1}²; a
# remainder below this fraction means α is round-off even if the recursed
# vector disagrees
_PYTH_TOL = 1e-13


class _Columns:
    """Append-only column store with amortized growth."""

    def __init__(self, rows: int, capacity: int = 16):
        self._data = np.empty((rows, capacity))
        self.n = 0

    def append(self, col: np.ndarray) -> None:
        if self.n == self._data.shape[1]:
            grown = np.empty((self._data.shape[0], 2 * self._data.shape[1]))
            grown[:, : self.n] = self._data[:, : self.n]
            self._data = grown
        self._data[:, self.n] = col
        self.n += 1

    def view(self, k: Optional[int] = None) -> np.ndarray:
        k = self.n if k is None else k
        return self._data[:, :k]


@dataclass
class BidiagonalMatrix:
    """The lower-bidiagonal ``(k+1) x k`` matrix ``B_k`` and its compact SVD.

    ``diag`` holds ``α_1..α_k`` and ``subdiag`` holds ``β_2..β_{k+1}``.
    """

    diag: np.ndarray
    subdiag: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        self.subdiag = np.asarray(self.subdiag, dtype=float)
        if self.diag.shape != self.subdiag.shape:
            raise ValueError("B_k needs k diagonal and k subdiagonal entries")

    @property
    def k(self) -> int:
        return self.diag.shape[0]

    @cached_property
    def matrix(self) -> np.ndarray:
        k = self.k
        B = np.zeros((k + 1, k))
        idx = np.arange(k)
        B[idx, idx] = self.diag
        B[idx + 1, idx] = self.subdiag
        return B

    @cached_property
    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(P, s, Q)`` with ``B = P diag(s) Q^T``, ``s`` descending."""
        if self.k == 0:
            return np.zeros((1, 0)), np.zeros(0), np.zeros((0, 0))
        P, s, Qt = np.linalg.svd(self.matrix, full_matrices=False)
        return P, s, Qt.T

    @cached_property
    def e1_residual(self) -> float:
        """``||e_1 - P P^T e_1||²``, the part of ``e_1`` outside the range of ``B_k``.

        Read off the left null vector of the full SVD, which avoids the
        cancellation in ``1 - ||P^T e_1||²``.
        """
        if self.k == 0:
            return 1.0
        P_full = np.linalg.svd(self.matrix, full_matrices=True)[0]
        return float(P_full[0, self.k:] @ P_full[0, self.k:])

    @property
    def singular_values(self) -> np.ndarray:
        return self.svd[1]

    @cached_property
    def gram(self) -> np.ndarray:
        """``T_k = B_k^T B_k`` (symmetric tridiagonal)."""
        return self.matrix.T @ self.matrix


@dataclass
class QgkbState:
    """Mutable state of one Q-GKB run.

    After ``k`` completed steps the state holds ``α_1..α_{k+1}``,
    ``β_1..β_{k+1}``, ``u_1..u_{k+1}`` and ``v_1..v_{k+1}`` (the trailing
    ``α``/``v`` are missing when the run broke down at step ``k``).
    """

    M: GramMap
    gamma: SpdMap
    y: np.ndarray
    reorth: bool = True
    tol: float = BREAKDOWN_TOL
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    broken: str = "none"
    k: int = 0

    def __post_init__(self):
        m = self.M.dim
        self._U = _Columns(m)
        self._GU = _Columns(m)  # Γ^{-1} u_i
        self._V = _Columns(m)
        self._MV = _Columns(m)
        n = self.M.forward.cols
        self._W = _Columns(n)  # G^T v_i
        self._SW = _Columns(n)  # Σ G^T v_i
        self._alpha_ref = None
        self._beta_ref = None

    # -- accessors -------------------------------------------------------
    @property
    def beta1(self) -> float:
        return self.betas[0]

    @property
    def U(self) -> np.ndarray:
        return self._U.view()

    @property
    def V(self) -> np.ndarray:
        return self._V.view()

    @property
    def MV(self) -> np.ndarray:
        return self._MV.view()

    @property
    def SW(self) -> np.ndarray:
        """Columns ``Σ G^T v_i``; the posterior mean lives in their span."""
        return self._SW.view()

    @property
    def is_broken(self) -> bool:
        return self.broken != "none"

    def U_k1(self, k: Optional[int] = None) -> np.ndarray:
        """``U_{k+1}``; a zero last column stands in for ``u_{k+1}`` after a β breakdown."""
        k = self.k if k is None else k
        U = self._U.view()
        if U.shape[1] >= k + 1:
            return U[:, : k + 1]
        return np.column_stack([U[:, :k], np.zeros(U.shape[0])])

    def V_k(self, k: Optional[int] = None) -> np.ndarray:
        k = self.k if k is None else k
        return self._V.view(k)

    def alpha_next(self, k: Optional[int] = None) -> float:
        """``α_{k+1}`` (zero if it was never formed)."""
        k = self.k if k is None else k
        return self.alphas[k] if len(self.alphas) > k else 0.0

    def beta_next(self, k: Optional[int] = None) -> float:
        """``β_{k+1}``."""
        k = self.k if k is None else k
        return self.betas[k] if len(self.betas) > k else 0.0

    # -- recursion pieces ------------------------------------------------
    def _orth_gamma(self, r: np.ndarray) -> tuple[np.ndarray, float]:
        """Γ^{-1}-orthogonalize ``r`` against stored ``u_i`` (two passes)."""
        extra = 0.0
        if self.reorth and self._U.n:
            U, GU = self._U.view(), self._GU.view()
            for _ in range(2):
                c = GU.T @ r
                r = r - U @ c
                extra += float(c @ c)
        return r, extra

    def _orth_m(self, s, t, St):
        """M-orthogonalize ``s`` against the stored ``v_i``.

        ``t = G^T s`` and ``St = Σ t`` are updated alongside.
        """
        if self.reorth and self._V.n:
            V, W, SW = self._V.view(), self._W.view(), self._SW.view()
            for _ in range(2):
                c = SW.T @ t
                t = t - W @ c
                St = St - SW @ c
                s = s - V @ c
        return s, t, St

    def _new_u(self, r: np.ndarray, beta: float) -> None:
        u = r / beta
        self._U.append(u)
        self._GU.append(self.gamma.solve(u))

    def _new_alpha(self, g: np.ndarray, beta: float) -> bool:
        """Form ``α v = g - β v_prev`` with ``g = Γ^{-1} u``; False on breakdown."""
        h = self.M.forward.rmatvec(g)
        Sh = self.M.prior.matvec(h)
        g_norm = float(np.sqrt(max(float(h @ Sh), 0.0)))  # ||g||_M, free of recursion error
        if self._V.n:
            j = self._V.n - 1
            s = g - beta * self._V.view()[:, j]
            t = h - beta * self._W.view()[:, j]
            St = Sh - beta * self._SW.view()[:, j]
        else:
            s, t, St = g.copy(), h, Sh
        s, t, St = self._orth_m(s, t, St)
        alpha = float(np.sqrt(max(float(t @ St), 0.0)))
        if self._alpha_ref is None:
            self._alpha_ref = alpha
        clean_sq = g_norm**2 - beta**2
        if (
            alpha == 0.0
            or alpha <= self.tol * self._alpha_ref
            or alpha <= BREAKDOWN_RTOL * g_norm
            or clean_sq <= _PYTH_TOL * g_norm**2
        ):
            self.broken = "alpha_zero"
            return False
        self.alphas.append(alpha)
        self._V.append(s / alpha)
        self._W.append(t / alpha)
        self._SW.append(St / alpha)
        self._MV.append(self.M.forward.matvec(St) / alpha)
        return True


def qgkb_init(M: GramMap, gamma: SpdMap, y, reorth: bool = True, tol: float = BREAKDOWN_TOL) -> QgkbState:
    """Start Q-GKB from data ``y``.

    Parameters
    ----------
    M : GramMap
        ``G Σ G^T`` as a matrix-free operator.
    gamma : SpdMap
        Noise covariance ``Γ``; only its ``inverse_apply`` is used.
    y : ndarray
        Nonzero data vector.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (M.dim,):
        raise ValueError(f"data has shape {y.shape}, expected ({M.dim},)")
    if gamma.inverse_apply is None:
        raise ValueError("noise covariance must provide inverse_apply")
    state = QgkbState(M, gamma, y, reorth=reorth, tol=tol)
    gy = gamma.solve(y)
    beta1 = float(np.sqrt(max(float(y @ gy), 0.0)))
    if beta1 == 0.0:
        raise ValueError("empty data: y is zero")
    state.betas.append(beta1)
    state._beta_ref = beta1
    state._U.append(y / beta1)
    state._GU.append(gy / beta1)
    state._new_alpha(state._GU.view()[:, 0], 0.0)
    return state


def qgkb_step(state: QgkbState) -> QgkbState:
    """Advance one step: form ``β_{k+1}, u_{k+1}, α_{k+1}, v_{k+1}``."""
    if state.is_broken:
        raise RuntimeError(f"Q-GKB already broke down ({state.broken}) at k={state.k}")
    k = state.k  # computing index k+1 (1-based); v_k is column k
    alpha_k = state.alphas[k]
    u_k = state._U.view()[:, k]
    r = state._MV.view()[:, k] - alpha_k * u_k
    r, extra = state._orth_gamma(r)
    beta = float(np.sqrt(max(float(r @ state.gamma.solve(r)), 0.0)))
    # reference: the Γ^{-1}-norm of M v_k, which equals sqrt(α_k² + β_{k+1}²)
    if beta == 0.0 or beta <= state.tol * state._beta_ref or beta <= BREAKDOWN_RTOL * np.sqrt(alpha_k**2 + extra + beta**2):
        state.betas.append(0.0)
        state.broken = "beta_zero"
        state.k = k + 1
        return state
    state.betas.append(beta)
    state._new_u(r, beta)
    state.k = k + 1
    state._new_alpha(state._GU.view()[:, k + 1], beta)
    return state


def bidiagonal(state: QgkbState, k: Optional[int] = None) -> BidiagonalMatrix:
    """Assemble ``B_k`` from a state that has completed at least ``k`` steps."""
    k = state.k if k is None else k
    if not 0 <= k <= state.k:
        raise ValueError(f"k={k} outside completed range 0..{state.k}")
    return BidiagonalMatrix(np.array(state.alphas[:k]), np.array(state.betas[1 : k + 1]))
