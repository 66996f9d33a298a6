"""Covariance kernels and prior covariance operators.

Three storage kinds are provided:

* ``dense`` -- the full kernel matrix, with a (possibly jittered) Cholesky
  factor for solves and sampling;
* ``kronecker`` -- ``Σ1 ⊗ Σ1`` for separable kernels on tensor grids;
* ``circulant`` -- stationary kernels on uniform square grids, applied by
  zero-padded FFT convolution.

Grids are row-major: pixel ``(i, j)`` of an ``n1 x n1`` image sits at
index ``i * n1 + j``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy import special
from scipy.spatial.distance import cdist

from .operators import SpdMap, circulant_apply, kronecker_apply

logger = logging.getLogger(__name__)

__all__ = [
    "KernelSpec",
    "PriorCovariance",
    "kernel_eval",
    "uniform_grid",
    "dense_covariance",
    "separable_covariance",
    "circulant_covariance",
    "JITTER_LADDER",
]

FAMILIES = ("gaussian", "exponential", "matern")

#: relative jitters tried (in order) when a dense factorization fails
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)

# below this scaled distance the Matérn kernel is replaced by its r -> 0 limit
_MATERN_SMALL = 1e-6


def _supported_nu(nu: float) -> bool:
    twice = 2.0 * nu
    return nu > 0 and abs(twice - round(twice)) < 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic covariance kernel.

    Parameters
    ----------
    family : {"gaussian", "exponential", "matern"}
    variance : float
        Marginal variance ``σ²`` (value at zero distance).
    length : float
        Correlation length (``l`` for gaussian/exponential, ``ρ`` for Matérn).
    nu : float, optional
        Matérn smoothness; only half-integers and positive integers are supported.
    """

    family: str
    variance: float = 1.0
    length: float = 1.0
    nu: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive")
        if not self.length > 0:
            raise ValueError("kernel length must be positive")
        if self.family == "matern":
            if self.nu is None or not _supported_nu(float(self.nu)):
                raise ValueError(f"Matérn smoothness must be a positive integer or half-integer, got {self.nu}")
        elif self.nu is not None:
            raise ValueError(f"{self.family} kernel takes no smoothness parameter")

    def __call__(self, r):
        return kernel_eval(self, r)


def _bessel_k_int(order: int, x: np.ndarray) -> np.ndarray:
    """Modified Bessel function of the second kind, integer order, by upward recurrence."""
    k_prev = special.k0(x)
    if order == 0:
        return k_prev
    k_cur = special.k1(x)
    for n in range(1, order):
        k_prev, k_cur = k_cur, k_prev + (2.0 * n / x) * k_cur
    return k_cur


def _matern_corr(nu: float, x: np.ndarray) -> np.ndarray:
    """Matérn correlation as a function of the scaled distance ``x = sqrt(2ν) r / ρ``."""
    out = np.ones_like(x)
    big = x >= _MATERN_SMALL
    xb = x[big]
    if abs(nu - round(nu)) > 0.25:  # half-integer: polynomial times exponential
        p = int(round(nu - 0.5))
        poly = np.zeros_like(xb)
        for i in range(p + 1):
            coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
            poly += coef * (2.0 * xb) ** (p - i)
        out[big] = math.factorial(p) / math.factorial(2 * p) * np.exp(-xb) * poly
    else:
        order = int(round(nu))
        with np.errstate(over="ignore", invalid="ignore"):
            val = 2.0 ** (1.0 - nu) / math.gamma(nu) * xb**nu * _bessel_k_int(order, xb)
        out[big] = np.where(np.isfinite(val), val, 0.0)
    return out


def kernel_eval(spec: KernelSpec, r):
    """Evaluate the kernel at nonnegative distance(s) ``r``."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0) or np.any(np.isnan(r_arr)):
        raise ValueError("distances must be nonnegative")
    if spec.family == "gaussian":
        val = np.exp(-(r_arr**2) / (2.0 * spec.length**2))
    elif spec.family == "exponential":
        val = np.exp(-r_arr / spec.length)
    else:
        nu = float(spec.nu)
        x = np.atleast_1d(math.sqrt(2.0 * nu) * r_arr / spec.length)
        val = _matern_corr(nu, x).reshape(r_arr.shape)
    val = spec.variance * val
    return float(val) if np.ndim(val) == 0 else val


def uniform_grid(n: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Midpoints of ``n`` equal cells on ``[a, b]``."""
    if n < 1:
        raise ValueError("grid needs at least one point")
    h = (b - a) / n
    return a + h * (np.arange(n) + 0.5)


@dataclass(frozen=True)
class PriorCovariance(SpdMap):
    """A prior covariance operator ``Σ`` with its storage kind attached.

    ``diagonal`` is always populated.  ``inverse_apply`` is available for
    the dense kind only.  ``jitter`` is the relative diagonal shift that
    was needed for the Cholesky factor (the operator itself is not shifted).
    """

    kind: str = "dense"
    matrix: Optional[np.ndarray] = field(default=None, repr=False)
    factor: Optional[np.ndarray] = field(default=None, repr=False)
    kron_factors: tuple = field(default=(), repr=False)
    spectrum: Optional[np.ndarray] = field(default=None, repr=False)
    jitter: float = 0.0
    spectrum_min_ratio: float = 0.0

    def sqrt_apply(self, xi: np.ndarray) -> np.ndarray:
        """Apply a factor ``L`` with ``L L^T = Σ`` (up to the recorded jitter)."""
        if self.kind == "dense":
            return self.factor @ xi
        if self.kind == "kronecker":
            L1 = self.kron_factors[1]
            return kronecker_apply(L1, L1, xi)
        raise ValueError(f"no square-root factor available for a {self.kind} prior")

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return np.array(self.matrix)
        if self.kind == "kronecker":
            S1 = self.kron_factors[0]
            return np.kron(S1, S1)
        return self.todense()


def _jittered_cholesky(S: np.ndarray, scale: float, what: str):
    n = S.shape[0]
    for tau in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(S + tau * scale * np.eye(n)) if tau else np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            continue
        if tau:
            logger.info("%s: Cholesky needed relative jitter %.0e", what, tau)
        return L, tau
    raise np.linalg.LinAlgError(
        f"{what}: Cholesky failed even with relative jitter {JITTER_LADDER[-1]:.0e}"
    )


def dense_covariance(spec: KernelSpec, grid) -> PriorCovariance:
    """Dense kernel matrix ``Σ_ij = k(|g_i - g_j|)`` on an arbitrary point set.

    ``grid`` is either a 1-D array of coordinates or an ``(n, d)`` array of points.
    """
    pts = np.asarray(grid, dtype=float)
    if pts.size == 0:
        raise ValueError("grid must be nonempty")
    if pts.ndim == 1:
        pts = pts[:, None]
    S = kernel_eval(spec, cdist(pts, pts))
    S = np.atleast_2d(S)
    S = 0.5 * (S + S.T)
    L, tau = _jittered_cholesky(S, spec.variance, "dense_covariance")
    cf = (L, True)
    S.setflags(write=False)
    L.setflags(write=False)
    return PriorCovariance(
        dim=S.shape[0],
        apply=lambda v: S @ v,
        diagonal=np.diag(S).copy(),
        inverse_apply=lambda v: sla.cho_solve(cf, v),
        name="prior(dense)",
        kind="dense",
        matrix=S,
        factor=L,
        jitter=tau,
    )


def separable_covariance(spec1d: KernelSpec, grid1d) -> PriorCovariance:
    """``Σ1 ⊗ Σ1`` on the tensor grid ``grid1d x grid1d``.

    Each factor carries the full ``σ²`` of ``spec1d``, so the marginal
    variance of the 2-D field is ``σ⁴``.
    """
    g = np.asarray(grid1d, dtype=float).ravel()
    if g.size == 0:
        raise ValueError("grid must be nonempty")
    S1 = np.atleast_2d(kernel_eval(spec1d, np.abs(g[:, None] - g[None, :])))
    S1 = 0.5 * (S1 + S1.T)
    L1, tau = _jittered_cholesky(S1, spec1d.variance, "separable_covariance")
    S1.setflags(write=False)
    L1.setflags(write=False)
    d1 = np.diag(S1)
    return PriorCovariance(
        dim=g.size**2,
        apply=lambda v: kronecker_apply(S1, S1, v),
        diagonal=np.kron(d1, d1),
        name="prior(kronecker)",
        kind="kronecker",
        kron_factors=(S1, L1),
        jitter=tau,
    )


def _torus_distances(n1: int, h: float) -> np.ndarray:
    d = np.arange(2 * n1)
    d = np.minimum(d, 2 * n1 - d) * h
    return np.sqrt(d[:, None] ** 2 + d[None, :] ** 2)


def circulant_covariance(spec: KernelSpec, n1: int, length: float = 1.0) -> PriorCovariance:
    """Stationary kernel on the ``n1 x n1`` midpoint grid of ``[0, length]²``.

    The kernel is wrapped onto a ``2 n1 x 2 n1`` torus; the embedded block
    reproduces the dense covariance exactly whatever the sign of the
    embedding spectrum, so the spectrum is used as is.  Negative spectral
    values (common for smooth kernels with long correlation lengths) only
    matter for sampling, which this kind does not offer; they are recorded
    in ``spectrum_min_ratio`` and reported with a warning.
    """
    if n1 < 1:
        raise ValueError("grid side must be positive")
    h = length / n1
    row = kernel_eval(spec, _torus_distances(n1, h))
    spectrum = np.real(np.fft.fft2(row))
    ratio = float(spectrum.min()) / float(spectrum.max())
    if ratio < -1e-10:
        warnings.warn(
            f"circulant embedding spectrum is indefinite (min/max = {ratio:.2e}); "
            "covariance products are still exact",
            RuntimeWarning,
            stacklevel=2,
        )
    spectrum.setflags(write=False)
    return PriorCovariance(
        dim=n1 * n1,
        apply=lambda v: circulant_apply(spectrum, v),
        diagonal=np.full(n1 * n1, spec.variance),
        name="prior(circulant)",
        kind="circulant",
        spectrum=spectrum,
        spectrum_min_ratio=ratio,
    )
