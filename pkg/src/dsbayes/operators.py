"""Matrix-free linear operators.

Every operator in the package is a thin wrapper around one or two
callables.  Composition happens by wrapping; nothing is ever assembled
except through :meth:`LinearMap.todense` / :meth:`SpdMap.todense`, which
exist for verification at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

Vector = np.ndarray
Apply = Callable[[np.ndarray], np.ndarray]

__all__ = [
    "LinearMap",
    "SpdMap",
    "GramMap",
    "weighted_inner",
    "weighted_norm",
    "kronecker_apply",
    "circulant_apply",
    "adjoint_mismatch",
    "estimate_norm",
]


def _check_len(v: np.ndarray, n: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != n:
        raise ValueError(f"{what}: expected a vector of length {n}, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class LinearMap:
    """A linear map ``R^cols -> R^rows`` given by its action and adjoint action.

    Parameters
    ----------
    rows, cols : int
        Output and input dimensions.
    forward : callable
        ``v -> A v`` for ``v`` of length ``cols``.
    adjoint : callable
        ``u -> A^T u`` for ``u`` of length ``rows``.
    name : str, optional
        Label used in ``repr`` and error messages.
    """

    rows: int
    cols: int
    forward: Apply = field(repr=False)
    adjoint: Apply = field(repr=False)
    name: str = "LinearMap"

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise ValueError("operator dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def matvec(self, v: Vector) -> Vector:
        v = _check_len(v, self.cols, self.name)
        return np.asarray(self.forward(v), dtype=float)

    def rmatvec(self, u: Vector) -> Vector:
        u = _check_len(u, self.rows, self.name + " (adjoint)")
        return np.asarray(self.adjoint(u), dtype=float)

    __call__ = matvec

    @property
    def T(self) -> "LinearMap":
        return LinearMap(self.cols, self.rows, self.adjoint, self.forward, self.name + ".T")

    def todense(self) -> np.ndarray:
        """Materialize by applying to the identity columns (verification only)."""
        out = np.empty((self.rows, self.cols))
        e = np.zeros(self.cols)
        for j in range(self.cols):
            e[j] = 1.0
            out[:, j] = self.matvec(e)
            e[j] = 0.0
        return out

    @classmethod
    def from_dense(cls, A, name: str = "dense") -> "LinearMap":
        A = np.array(A, dtype=float, copy=True)
        if A.ndim != 2:
            raise ValueError("from_dense expects a 2-D array")
        A.setflags(write=False)
        return cls(A.shape[0], A.shape[1], lambda v: A @ v, lambda u: A.T @ u, name)

    @classmethod
    def kronecker(cls, A, B, name: str = "kron") -> "LinearMap":
        """``A ⊗ B`` acting on row-major flattened ``A.shape[1] x B.shape[1]`` arrays."""
        A = np.array(A, dtype=float, copy=True)
        B = np.array(B, dtype=float, copy=True)
        A.setflags(write=False)
        B.setflags(write=False)
        p, q = A.shape[1], B.shape[1]
        r, s = A.shape[0], B.shape[0]

        def fwd(v):
            return (A @ v.reshape(p, q) @ B.T).ravel()

        def adj(u):
            return (A.T @ u.reshape(r, s) @ B).ravel()

        return cls(r * s, p * q, fwd, adj, name)


@dataclass(frozen=True)
class SpdMap:
    """Symmetric positive (semi)definite operator on ``R^dim``.

    ``diagonal`` and ``inverse_apply`` are optional; code that needs them
    checks for ``None`` and raises.
    """

    dim: int
    apply: Apply = field(repr=False)
    diagonal: Optional[np.ndarray] = field(default=None, repr=False)
    inverse_apply: Optional[Apply] = field(default=None, repr=False)
    name: str = "SpdMap"

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("operator dimension must be positive")
        if self.diagonal is not None:
            d = np.array(self.diagonal, dtype=float)
            if d.shape != (self.dim,):
                raise ValueError("diagonal has the wrong length")
            d.setflags(write=False)
            object.__setattr__(self, "diagonal", d)

    def matvec(self, v: Vector) -> Vector:
        v = _check_len(v, self.dim, self.name)
        return np.asarray(self.apply(v), dtype=float)

    __call__ = matvec

    def solve(self, v: Vector) -> Vector:
        if self.inverse_apply is None:
            raise ValueError(f"{self.name} has no inverse available")
        v = _check_len(v, self.dim, self.name)
        return np.asarray(self.inverse_apply(v), dtype=float)

    def todense(self) -> np.ndarray:
        out = np.empty((self.dim, self.dim))
        e = np.zeros(self.dim)
        for j in range(self.dim):
            e[j] = 1.0
            out[:, j] = self.matvec(e)
            e[j] = 0.0
        return out

    def as_linear_map(self) -> LinearMap:
        return LinearMap(self.dim, self.dim, self.apply, self.apply, self.name)

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "SpdMap":
        if scale <= 0:
            raise ValueError("scale must be positive")
        return cls(
            dim,
            lambda v: scale * v,
            diagonal=np.full(dim, float(scale)),
            inverse_apply=lambda v: v / scale,
            name="identity",
        )

    @classmethod
    def from_diagonal(cls, d, name: str = "diagonal") -> "SpdMap":
        d = np.array(d, dtype=float, copy=True)
        if d.ndim != 1:
            raise ValueError("expected a 1-D diagonal")
        if np.any(d <= 0):
            raise ValueError("diagonal entries must be positive")
        d.setflags(write=False)
        return cls(len(d), lambda v: d * v, diagonal=d, inverse_apply=lambda v: v / d, name=name)

    @classmethod
    def from_dense(cls, S, name: str = "dense", factor: bool = True) -> "SpdMap":
        """Wrap a dense SPD matrix; the Cholesky factor is computed once here."""
        S = np.array(S, dtype=float, copy=True)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("expected a square matrix")
        S = 0.5 * (S + S.T)
        S.setflags(write=False)
        inv = None
        if factor:
            try:
                cf = sla.cho_factor(S, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"{name}: matrix is not positive definite") from exc
            inv = lambda v: sla.cho_solve(cf, v)  # noqa: E731
        return cls(S.shape[0], lambda v: S @ v, diagonal=np.diag(S).copy(), inverse_apply=inv, name=name)

    @classmethod
    def from_spec(cls, spec, dim: int, name: str = "noise") -> "SpdMap":
        """Build from ``None``/scalar (scaled identity), a vector (diagonal) or a matrix."""
        if spec is None:
            return cls.identity(dim)
        arr = np.asarray(spec, dtype=float)
        if arr.ndim == 0:
            return cls.identity(dim, float(arr))
        if arr.ndim == 1:
            if arr.shape[0] != dim:
                raise ValueError(f"{name}: diagonal length {arr.shape[0]} != {dim}")
            return cls.from_diagonal(arr, name=name)
        if arr.shape != (dim, dim):
            raise ValueError(f"{name}: matrix shape {arr.shape} != {(dim, dim)}")
        return cls.from_dense(arr, name=name)


@dataclass(frozen=True)
class GramMap:
    """``M = G Σ G^T`` applied as three matrix-free products."""

    forward: LinearMap
    prior: SpdMap

    def __post_init__(self):
        if self.forward.cols != self.prior.dim:
            raise ValueError("forward operator and prior have mismatched dimensions")

    @property
    def dim(self) -> int:
        return self.forward.rows

    def apply(self, v: Vector) -> Vector:
        return self.forward.matvec(self.prior.matvec(self.forward.rmatvec(v)))

    __call__ = apply

    def apply_with_energy(self, v: Vector) -> tuple[Vector, float]:
        """Return ``M v`` and ``v^T M v``.

        The quadratic form is evaluated as ``t^T Σ t`` with ``t = G^T v``;
        this stays accurate when ``v`` has a large component in the null
        space of ``M``, where ``v^T (M v)`` would lose half the digits.
        """
        t = self.forward.rmatvec(v)
        w = self.prior.matvec(t)
        return self.forward.matvec(w), float(t @ w)

    def embed(self, u: Vector) -> Vector:
        """``u -> Σ G^T u``, the data-to-parameter embedding."""
        return self.prior.matvec(self.forward.rmatvec(u))

    def todense(self) -> np.ndarray:
        return SpdMap(self.dim, self.apply).todense()


def weighted_inner(B: SpdMap, u: Vector, v: Vector) -> float:
    """Return ``u^T B v``."""
    u = _check_len(u, B.dim, "weighted_inner")
    return float(np.dot(u, B.matvec(v)))


def weighted_norm(B: SpdMap, u: Vector) -> float:
    """Return ``sqrt(u^T B u)``; tiny negative round-off is clamped to zero."""
    return float(np.sqrt(max(weighted_inner(B, u, u), 0.0)))


def kronecker_apply(A, B, v: Vector) -> Vector:
    """Return ``(A ⊗ B) v`` without forming the Kronecker product.

    ``v`` is read as a row-major ``p x q`` array ``X`` and the result is
    ``A X B^T`` flattened the same way.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != A.shape[1] or B.shape[0] != B.shape[1]:
        raise ValueError("kronecker_apply expects square factors")
    p, q = A.shape[0], B.shape[0]
    v = _check_len(v, p * q, "kronecker_apply")
    return (A @ v.reshape(p, q) @ B.T).ravel()


def circulant_apply(spectrum, v: Vector) -> Vector:
    """Apply a stationary covariance on an ``N x N`` grid by circulant embedding.

    Parameters
    ----------
    spectrum : ndarray, shape (2N, 2N)
        Real 2-D DFT of the kernel's first row on the ``2N x 2N`` torus.
    v : ndarray, shape (N*N,)
        Row-major flattened image.

    The input is zero-padded to ``2N x 2N``, multiplied pointwise in the
    Fourier domain and the leading ``N x N`` block is returned.
    """
    spectrum = np.asarray(spectrum)
    v = np.asarray(v, dtype=float)
    N = int(round(np.sqrt(v.size)))
    if v.ndim != 1 or N * N != v.size:
        raise ValueError("circulant_apply expects a square image flattened to a vector")
    if spectrum.shape != (2 * N, 2 * N):
        raise ValueError(f"spectrum must have shape {(2 * N, 2 * N)}, got {spectrum.shape}")
    padded = np.zeros((2 * N, 2 * N))
    padded[:N, :N] = v.reshape(N, N)
    out = np.fft.irfft2(np.fft.rfft2(padded) * spectrum[:, : N + 1], s=(2 * N, 2 * N))
    return out[:N, :N].ravel()


def estimate_norm(op, dim: int, rng=None, iters: int = 20) -> float:
    """Power-iteration estimate of ``||op||_2`` for a symmetric action ``op``."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = rng.standard_normal(dim)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = op(x)
        est = np.linalg.norm(y)
        if est == 0.0:
            return 0.0
        x = y / est
    return float(est)


def adjoint_mismatch(A: LinearMap, rng=None, trials: int = 100) -> float:
    """Worst relative adjoint defect ``|<Av,u> - <v,A^T u>| / (||u|| ||v|| ||A||)``."""
    rng = np.random.default_rng(0) if rng is None else rng
    scale = estimate_norm(lambda x: A.rmatvec(A.matvec(x)), A.cols, rng) ** 0.5
    scale = scale if scale > 0 else 1.0
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(A.rows)
        v = rng.standard_normal(A.cols)
        lhs = np.dot(A.matvec(v), u)
        rhs = np.dot(v, A.rmatvec(u))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(v) * scale))
    return worst
