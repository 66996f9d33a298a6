"""Empirical-Bayes λ estimation and the low-rank posterior approximation.

After ``k`` Q-GKB steps the posterior ``N(x_λ, C_λ)`` is approximated by

    x̂ = Σ G^T V_k ξ,         ξ = (B_k^T B_k + λI)^{-1} B_k^T β_1 e_1
    Ĉ = λ^{-1} Σ - λ^{-1} Σ G^T V_k (λI + T_k)^{-1} T_k V_k^T G Σ

with ``T_k = B_k^T B_k``, and λ minimizes the projected negative log
marginal likelihood, which needs only the SVD of ``B_k``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .operators import GramMap, LinearMap, SpdMap
from .qgkb import BREAKDOWN_TOL, BidiagonalMatrix, QgkbState, bidiagonal, qgkb_init, qgkb_step

logger = logging.getLogger(__name__)

__all__ = [
    "marginal_nll",
    "estimate_lambda",
    "LambdaEstimate",
    "projected_solution",
    "PosteriorApproximation",
    "RitzPair",
    "ritz_pairs",
    "EbRecord",
    "EbTrace",
    "InferenceConfig",
    "DiagnosticsTrace",
    "run_inference",
]

DEFAULT_BRACKET = (1e-10, 1e10)
_GRID_POINTS = 241  # coarse log-λ scan before the local refinement


def marginal_nll(B: BidiagonalMatrix, beta1: float, lam):
    """Projected negative log marginal likelihood ``L^(k)(λ)``.

    The constant ``log det Γ`` is left out.  ``lam`` may be a scalar or an
    array; the result has the same shape.

    Examples
    --------
    >>> B = BidiagonalMatrix([1.0], [0.0])
    >>> round(marginal_nll(B, 2.0, 1.0), 12) == round(math.log(2) + 2.0, 12)
    True
    """
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(~(lam_arr > 0)):
        raise ValueError("λ must be positive")
    P, s, _ = B.svd
    s2 = s**2
    p1 = P[0, :] ** 2 if s.size else np.zeros(0)
    la = lam_arr[..., None]
    logs = np.log1p(s2 / la).sum(axis=-1)
    # 1 - Σ s²/(s²+λ) p² rewritten without cancellation for λ << s²
    fit = beta1**2 * (B.e1_residual + (la / (s2 + la) * p1).sum(axis=-1))
    out = logs + fit
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class LambdaEstimate:
    value: float
    nll: float
    at_boundary: bool


def estimate_lambda(
    B: BidiagonalMatrix,
    beta1: float,
    bracket: tuple[float, float] = DEFAULT_BRACKET,
    tol: float = 1e-8,
) -> LambdaEstimate:
    """Minimize :func:`marginal_nll` over ``λ ∈ [lo, hi]``.

    A log-spaced scan locates the best cell, then a bounded Brent search
    (golden-section steps with parabolic acceleration) on ``log λ``
    refines it to relative tolerance ``tol``.  If the minimum sits at an
    end of the bracket that end is returned with ``at_boundary=True``.
    """
    lo, hi = (float(b) for b in bracket)
    if not (0 < lo < hi) or not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"invalid λ bracket ({lo}, {hi})")
    s = B.singular_values
    if s.size == 0 or not np.any(s > 0):
        # no data information: L is flat and decreasing toward large λ
        return LambdaEstimate(hi, float(marginal_nll(B, beta1, hi)), True)

    grid = np.linspace(math.log(lo), math.log(hi), _GRID_POINTS)
    vals = marginal_nll(B, beta1, np.exp(grid))
    i = int(np.argmin(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda t: marginal_nll(B, beta1, math.exp(t)),
        bounds=(a, b),
        method="bounded",
        options={"xatol": tol},
    )
    t_best, f_best = float(res.x), float(res.fun)
    if vals[i] < f_best:
        t_best, f_best = float(grid[i]), float(vals[i])
    at_boundary = False
    for end in (0, grid.size - 1):
        if vals[end] <= f_best:
            t_best, f_best, at_boundary = float(grid[end]), float(vals[end]), True
    if not at_boundary and (abs(t_best - grid[0]) <= tol or abs(t_best - grid[-1]) <= tol):
        at_boundary = True
    lam = lo if t_best == grid[0] else hi if t_best == grid[-1] else math.exp(t_best)
    return LambdaEstimate(lam, f_best, at_boundary)


def projected_solution(B: BidiagonalMatrix, beta1: float, lam: float) -> np.ndarray:
    """``ξ = (B^T B + λI)^{-1} B^T β_1 e_1``."""
    if not lam > 0:
        raise ValueError("λ must be positive")
    if B.k == 0:
        return np.zeros(0)
    rhs = beta1 * B.matrix[0, :]
    return sla.solve(B.gram + lam * np.eye(B.k), rhs, assume_a="pos")


@dataclass(frozen=True)
class RitzPair:
    theta: float
    coeffs: np.ndarray
    residual: float


def ritz_pairs(B: BidiagonalMatrix, alpha_next: float = 0.0) -> list[RitzPair]:
    """Ritz pairs of ``(M, Γ)`` from ``B_k``.

    ``θ_i = s_i²`` with coefficient vectors ``q_i`` (right singular
    vectors).  The residual bound ``α_{k+1} β_{k+1} |e_k^T q_i|`` equals
    ``||M V q_i - θ_i Γ V q_i|| / ||Γ v_{k+1}||``.
    """
    if B.k < 1:
        raise ValueError("Ritz pairs need k >= 1")
    _, s, Q = B.svd
    beta_next = float(B.subdiag[-1])
    scale = abs(alpha_next * beta_next)
    return [RitzPair(float(s[i] ** 2), Q[:, i].copy(), scale * abs(Q[-1, i])) for i in range(B.k)]


@dataclass
class PosteriorApproximation:
    """Gaussian approximation ``N(x̂, Ĉ)`` built from ``k`` Q-GKB steps.

    Parameters
    ----------
    lam : float
        Precision scaling λ of the prior ``N(0, λ^{-1} Σ)``.
    B : BidiagonalMatrix
    V : ndarray, shape (m, k)
        Quotient representatives ``v_1..v_k``.
    prior : SpdMap
    forward : LinearMap
    beta1 : float
    W : ndarray, optional
        Columns ``Σ G^T v_i``; built on first use when not supplied.
    """

    lam: float
    B: BidiagonalMatrix
    V: np.ndarray
    prior: SpdMap
    forward: LinearMap
    beta1: float
    W: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("λ must be positive")
        if self.V.shape[1] != self.B.k:
            raise ValueError("V must have k columns")
        self.xi = projected_solution(self.B, self.beta1, self.lam)
        self._D = None

    @property
    def k(self) -> int:
        return self.B.k

    @property
    def n(self) -> int:
        return self.forward.cols

    def embedded_basis(self) -> np.ndarray:
        """``W = Σ G^T V_k``, built one column at a time and cached."""
        if self.W is None or self.W.shape[1] < self.k:
            have = 0 if self.W is None else self.W.shape[1]
            cols = [self.prior.matvec(self.forward.rmatvec(self.V[:, j])) for j in range(have, self.k)]
            new = np.column_stack(cols) if cols else np.zeros((self.n, 0))
            self.W = new if self.W is None else np.column_stack([self.W, new])
        return self.W[:, : self.k]

    def posterior_mean(self) -> np.ndarray:
        """``Σ G^T (V_k ξ)``: one adjoint and one prior product."""
        if self.k == 0:
            return np.zeros(self.n)
        return self.prior.matvec(self.forward.rmatvec(self.V @ self.xi))

    def _shrink(self) -> np.ndarray:
        """``D = (λI + T)^{-1} T``."""
        if self._D is None:
            T = self.B.gram
            self._D = sla.solve(self.lam * np.eye(self.k) + T, T, assume_a="pos")
            self._D = 0.5 * (self._D + self._D.T)
        return self._D

    def posterior_cov_apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        Sv = self.prior.matvec(v)
        if self.k == 0:
            return Sv / self.lam
        t = self.V.T @ self.forward.matvec(Sv)
        T = self.B.gram
        w = sla.solve(self.lam * np.eye(self.k) + T, T @ t, assume_a="pos")
        return (Sv - self.prior.matvec(self.forward.rmatvec(self.V @ w))) / self.lam

    def posterior_variance(self) -> np.ndarray:
        """Diagonal of ``Ĉ``."""
        if self.prior.diagonal is None:
            raise ValueError("prior diagonal is required for the variance")
        base = np.asarray(self.prior.diagonal, dtype=float) / self.lam
        if self.k == 0:
            return base
        W = self.embedded_basis()
        var = base - np.einsum("ij,ij->i", W, W @ self._shrink()) / self.lam
        floor = -1e-10 * float(np.max(np.abs(base)))
        if np.any(var < floor):
            warnings.warn(
                f"posterior variance has entries down to {var.min():.3e}; clamped at 0",
                RuntimeWarning,
                stacklevel=2,
            )
        return np.maximum(var, 0.0)

    def ritz_pairs(self, alpha_next: float = 0.0) -> list[RitzPair]:
        return ritz_pairs(self.B, alpha_next)

    def ritz_vector(self, pair: RitzPair) -> np.ndarray:
        """Parameter-space image ``Σ G^T V q`` of a Ritz vector."""
        return self.prior.matvec(self.forward.rmatvec(self.V @ pair.coeffs))


@dataclass(frozen=True)
class EbRecord:
    k: int
    lam: float
    nll: float
    rel_change: float  # NaN at k = 1
    at_boundary: bool
    stopped: bool


@dataclass
class EbTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.records])


@dataclass(frozen=True)
class InferenceConfig:
    """Solver settings.

    ``stop_mode="double"`` requires the relative λ change to fall below
    ``stop_tol`` on two consecutive iterations, ``"single"`` on one.
    """

    k_max: int = 100
    stop_tol: float = 1e-3
    stop_mode: str = "double"
    reorth: bool = True
    bracket: tuple = DEFAULT_BRACKET
    lambda_tol: float = 1e-8
    breakdown_tol: float = BREAKDOWN_TOL

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("at least one step required")
        if self.stop_mode not in ("single", "double"):
            raise ValueError("stop_mode must be 'single' or 'double'")
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be nonnegative")
        lo, hi = self.bracket
        if not 0 < lo < hi:
            raise ValueError(f"invalid λ bracket {self.bracket}")


@dataclass
class DiagnosticsTrace:
    """Per-step bounds and optional error/spread metrics."""

    bounds: object  # diagnostics.BoundTrace or None
    rel_error: np.ndarray
    mstd: np.ndarray
    stop_reason: str
    broken: str


def run_inference(
    forward: LinearMap,
    prior: SpdMap,
    noise_cov: SpdMap,
    y,
    config: InferenceConfig | None = None,
    *,
    seeds: Optional[tuple[float, float]] = None,
    x_true: Optional[np.ndarray] = None,
    track_variance: bool = False,
    callback=None,
):
    """Q-GKB with empirical-Bayes λ until convergence, breakdown or ``k_max``.

    Parameters
    ----------
    seeds : (ζ_0, γ_0²), optional
        Trace seeds for the error bounds; bounds are skipped without them.
    x_true : ndarray, optional
        Enables the per-step relative error.
    track_variance : bool
        Record ``mstd`` of the approximate posterior at every step.
    callback : callable, optional
        Called as ``callback(k, state, approx)`` after each step.

    Returns
    -------
    (PosteriorApproximation, EbTrace, DiagnosticsTrace)
    """
    from .diagnostics import bound_trace, mstd as mstd_of

    config = config or InferenceConfig()
    M = GramMap(forward, prior)
    state = qgkb_init(M, noise_cov, y, reorth=config.reorth, tol=config.breakdown_tol)
    beta1 = state.beta1
    trace = EbTrace()
    rel_errors, spreads = [], []
    approx = None
    stop_reason = "breakdown" if state.is_broken else "k_max"
    hits = 0
    need = 1 if config.stop_mode == "single" else 2
    x_norm = float(np.linalg.norm(x_true)) if x_true is not None else None

    while not state.is_broken and state.k < config.k_max:
        qgkb_step(state)
        k = state.k
        B = bidiagonal(state, k)
        est = estimate_lambda(B, beta1, config.bracket, config.lambda_tol)
        if not (est.value > 0 and math.isfinite(est.value)):
            raise FloatingPointError(f"λ estimate {est.value} at k={k}")
        prev = trace.records[-1].lam if trace.records else None
        rel = abs(est.value - prev) / prev if prev is not None else float("nan")
        hits = hits + 1 if (prev is not None and rel <= config.stop_tol) else 0
        converged = hits >= need
        trace.records.append(EbRecord(k, est.value, est.nll, rel, est.at_boundary, converged))
        approx = PosteriorApproximation(est.value, B, state.V_k(k), prior, forward, beta1, W=state.SW[:, :k].copy())
        if x_true is not None:
            rel_errors.append(float(np.linalg.norm(approx.posterior_mean() - x_true)) / x_norm)
        if track_variance:
            spreads.append(mstd_of(approx.posterior_variance()))
        if callback is not None:
            callback(k, state, approx)
        logger.debug("k=%d λ=%.6g rel=%.3g", k, est.value, rel)
        if converged:
            stop_reason = "converged"
            break
        if state.is_broken:
            stop_reason = "breakdown"
    if approx is None:
        # α_1 = 0: y carries no information in the quotient space
        B0 = bidiagonal(state, 0)
        est = estimate_lambda(B0, beta1, config.bracket, config.lambda_tol)
        approx = PosteriorApproximation(est.value, B0, np.zeros((M.dim, 0)), prior, forward, beta1)
        stop_reason = "breakdown"

    bounds = None
    if seeds is not None and len(trace):
        k_last = trace.records[-1].k
        bounds = bound_trace(
            np.array(state.alphas[:k_last]),
            np.array(state.betas[: k_last + 1]),
            seeds[0],
            seeds[1],
            trace.lambdas,
        )
    diag = DiagnosticsTrace(bounds, np.array(rel_errors), np.array(spreads), stop_reason, state.broken)
    return approx, trace, diag
