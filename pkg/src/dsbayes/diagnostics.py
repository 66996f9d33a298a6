"""Accuracy certificates and summary metrics.

With ``A = Σ^{1/2} H Σ^{1/2}`` and ``Â_k`` its Q-GKB compression,
``ζ_k = Tr(A - Â_k)`` and ``γ_k = ||A - Â_k||_F`` follow scalar
recurrences in ``α_i, β_i``, seeded by ``ζ_0 = Tr(HΣ)`` and
``γ_0² = Tr((HΣ)²)``.  They bound the Förstner distance and the KL
divergence between the exact and approximate posteriors.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .operators import GramMap, LinearMap, SpdMap

logger = logging.getLogger(__name__)

__all__ = [
    "BoundTrace",
    "bound_trace",
    "TraceSeeds",
    "trace_seeds",
    "forstner_distance",
    "kl_gaussian",
    "mstd",
    "resolvent_difference_bound_check",
]

# a clamped deficit larger than this fraction of the seed flags lost orthogonality
_FLAG_FRACTION = 1e-8

# round-off allowance per recurrence step, in units of machine epsilon
_FLOOR_UNITS = 4.0


@dataclass(frozen=True)
class BoundTrace:
    """Per-step ``ζ_k``, ``γ_k`` and the two posterior error bounds (``k = 1..K``)."""

    zeta: np.ndarray
    gamma: np.ndarray
    dF_bound: np.ndarray
    kl_bound: np.ndarray
    clamped: bool = False
    flagged: bool = False
    zeta_floor: np.ndarray = None
    gamma_floor: np.ndarray = None

    def __len__(self):
        return self.zeta.shape[0]

    @property
    def resolved(self) -> np.ndarray:
        """Steps whose ``ζ_k`` and ``γ_k`` sit above the round-off floor of the recurrences.

        Both recurrences subtract from their seeds, so values below about
        ``k·ε·ζ_0`` and ``sqrt(k·ε)·γ_0`` carry no correct digits and the
        bounds built from them are not certificates.
        """
        if self.zeta_floor is None:
            return np.ones(len(self), dtype=bool)
        return (self.zeta > self.zeta_floor) & (self.gamma > self.gamma_floor)

    @property
    def last_resolved(self) -> int:
        """Largest ``k`` such that steps ``1..k`` are all resolved (0 if none)."""
        bad = np.flatnonzero(~self.resolved)
        return int(bad[0]) if bad.size else len(self)


def _clamp(x: float, seed: float, what: str, state: dict) -> float:
    if x >= 0:
        return x
    state["clamped"] = True
    if -x > _FLAG_FRACTION * max(seed, 0.0):
        state["flagged"] = True
        if what not in state["warned"]:
            state["warned"].add(what)
            warnings.warn(
                f"{what} went negative by {-x:.3e} (seed {seed:.3e}); "
                "the seed is underestimated or orthogonality was lost",
                RuntimeWarning,
                stacklevel=3,
            )
    return 0.0


def bound_trace(alphas, betas, zeta0: float, gamma0_sq: float, lambdas) -> BoundTrace:
    """Run the ``ζ``/``γ`` recurrences and evaluate both bounds.

    Parameters
    ----------
    alphas : array_like, shape (K,)
        ``α_1..α_K``.
    betas : array_like, shape (K + 1,)
        ``β_1..β_{K+1}`` (``β_{K+1} = 0`` after a β breakdown).
    zeta0, gamma0_sq : float
        ``Tr(HΣ)`` and ``Tr((HΣ)²)``.
    lambdas : array_like, shape (K,)
        The λ used for the bounds at each step.

    Notes
    -----
    Step ``k`` subtracts ``α_k² + β_{k+1}²`` from ``ζ`` and
    ``2 α_k² β_k² + (α_k² + β_{k+1}²)²`` from ``γ²``.  The cross term is
    absent at ``k = 1`` because ``v_0 = 0``: the squared Frobenius norm of
    ``T_k = B_k^T B_k`` only has off-diagonal entries ``α_k β_k`` for
    ``k >= 2``.

    The subtractions leave an absolute error of order ``k·ε`` times the
    seed; ``zeta_floor`` and ``gamma_floor`` record that level so that
    :attr:`BoundTrace.resolved` can mark steps past it.
    """
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)
    lam = np.asarray(lambdas, dtype=float)
    K = a.shape[0]
    if b.shape[0] != K + 1 or lam.shape[0] != K:
        raise ValueError(f"need K alphas, K+1 betas and K lambdas; got {a.shape[0]}, {b.shape[0]}, {lam.shape[0]}")
    if zeta0 < 0 or gamma0_sq < 0:
        raise ValueError("trace seeds must be nonnegative")
    if np.any(~(lam > 0)):
        raise ValueError("λ must be positive")
    state = {"clamped": False, "flagged": False, "warned": set()}
    zeta = np.empty(K)
    gsq = np.empty(K)
    z, g = float(zeta0), float(gamma0_sq)
    for j in range(K):
        diag = a[j] ** 2 + b[j + 1] ** 2
        cross = 2.0 * a[j] ** 2 * b[j] ** 2 if j >= 1 else 0.0
        z = _clamp(z - diag, zeta0, "ζ", state)
        g = _clamp(g - cross - diag**2, gamma0_sq, "γ²", state)
        zeta[j], gsq[j] = z, g
    gamma = np.sqrt(gsq)
    dF = gamma / lam
    lead = a[0] ** 2 * b[0] ** 2 if K else 0.0
    kl = (zeta + lead * gsq / (lam * (lam + gamma))) / (2.0 * lam)
    steps = np.arange(1, K + 1)
    eps = np.finfo(float).eps
    zeta_floor = _FLOOR_UNITS * steps * eps * float(zeta0)
    gamma_floor = np.sqrt(_FLOOR_UNITS * steps * eps * float(gamma0_sq))
    return BoundTrace(zeta, gamma, dF, kl, state["clamped"], state["flagged"], zeta_floor, gamma_floor)


@dataclass(frozen=True)
class TraceSeeds:
    zeta0: float
    gamma0_sq: float
    zeta0_se: float = 0.0
    gamma0_sq_se: float = 0.0

    def __iter__(self):
        return iter((self.zeta0, self.gamma0_sq))


def trace_seeds(
    forward: LinearMap,
    prior: SpdMap,
    noise_cov: SpdMap,
    mode: str = "dense",
    probes: int = 200,
    rng=None,
) -> TraceSeeds:
    """``ζ_0 = Tr(HΣ)`` and ``γ_0² = Tr((HΣ)²)``.

    Both equal the corresponding traces of ``K = Γ^{-1} M`` on the data
    side.  ``mode="dense"`` forms ``K`` exactly (``m`` products with ``M``);
    ``mode="hutchinson"`` uses ``probes`` Rademacher vectors and reports
    naive standard errors.
    """
    M = GramMap(forward, prior)
    m = M.dim
    if mode == "dense":
        K = np.column_stack([noise_cov.solve(M.apply(e)) for e in np.eye(m)]) if m else np.zeros((0, 0))
        return TraceSeeds(float(np.trace(K)), float(np.sum(K * K.T)))
    if mode != "hutchinson":
        raise ValueError(f"unknown trace mode {mode!r}")
    if probes < 2:
        raise ValueError("need at least two probes")
    rng = np.random.default_rng(rng)
    z1 = np.empty(probes)
    z2 = np.empty(probes)
    for i in range(probes):
        z = rng.choice((-1.0, 1.0), size=m)
        Kz = noise_cov.solve(M.apply(z))
        KtZ = M.apply(noise_cov.solve(z))  # K^T z
        z1[i] = z @ Kz
        z2[i] = KtZ @ Kz
    se = lambda x: float(x.std(ddof=1) / np.sqrt(x.size))  # noqa: E731
    return TraceSeeds(float(z1.mean()), float(z2.mean()), se(z1), se(z2))


def _sym(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def forstner_distance(A, B) -> float:
    """``sqrt(Σ log² σ_i)`` over the generalized eigenvalues of ``(A, B)``.

    Examples
    --------
    >>> round(forstner_distance(np.eye(4), np.e * np.eye(4)), 12)
    2.0
    """
    A, B = _sym(A), _sym(B)
    try:
        sig = sla.eigh(A, B, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("second argument is not positive definite") from exc
    if np.any(sig <= 0):
        raise np.linalg.LinAlgError("first argument is not positive definite")
    return float(np.sqrt(np.sum(np.log(sig) ** 2)))


def kl_gaussian(mean1, cov1, mean2, cov2) -> float:
    """``KL(N(mean1, cov1) || N(mean2, cov2))``."""
    cov1, cov2 = _sym(cov1), _sym(cov2)
    d = cov1.shape[0]
    try:
        c2 = sla.cho_factor(cov2)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("cov2 is not positive definite") from exc
    L1 = np.linalg.cholesky(cov1)
    logdet1 = 2.0 * np.sum(np.log(np.diag(L1)))
    logdet2 = 2.0 * np.sum(np.log(np.diag(c2[0])))
    diff = np.asarray(mean2, dtype=float) - np.asarray(mean1, dtype=float)
    tr = float(np.trace(sla.cho_solve(c2, cov1)))
    quad = float(diff @ sla.cho_solve(c2, diff))
    return 0.5 * (tr - d - (logdet1 - logdet2) + quad)


def mstd(variance) -> float:
    """Mean standard deviation ``sqrt(mean(variance))``."""
    v = np.asarray(variance, dtype=float)
    if v.size == 0:
        raise ValueError("empty variance vector")
    if np.any(v < -1e-12 * max(float(np.max(np.abs(v))), 1.0)):
        raise ValueError("variance has negative entries")
    return float(np.sqrt(np.mean(np.maximum(v, 0.0))))


def resolvent_difference_bound_check(A1, A2) -> bool:
    """Check ``||(I+A1)^{-1} - (I+A2)^{-1}|| <= δ/(1+δ)``, ``δ = ||A1 - A2||`` (spectral norms)."""
    A1, A2 = _sym(A1), _sym(A2)
    eye = np.eye(A1.shape[0])
    lhs = np.linalg.norm(np.linalg.inv(eye + A1) - np.linalg.inv(eye + A2), 2)
    delta = np.linalg.norm(A1 - A2, 2)
    return bool(delta / (1.0 + delta) - lhs >= -1e-10)
