"""Dense linear-algebra kernels the rest of the package builds on.

Conventions used everywhere in this package:

* matrices are ``numpy.ndarray`` of dtype float64,
* serialized matrices are C-contiguous (row-major), little-endian,
* entries must be finite (no NaN/Inf) at public-operation boundaries.

The heavy lifting is delegated to LAPACK through numpy/scipy; the
contracts (residual bounds, orthogonality, Procrustes optimality) are
asserted independently in the test suite.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(ArithmeticError):
    """Cholesky failed even after the ridge fallback.

    Signals rank-deficient accumulated sums; the caller owns the
    regularization or atom-replacement policy.
    """


class SvdFailure(ArithmeticError):
    """SVD iteration did not converge."""


class DegenerateRankWarning(UserWarning):
    """polar_factor input is (numerically) rank deficient.

    The returned factor is still a valid maximizer, but it is not unique:
    singular directions carry a sign ambiguity.
    """


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got ndim={out.ndim}")
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise ShapeMismatch(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def chol_spd_solve(a, b, *, ridge: bool = True) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Uses a Cholesky factorization plus two triangular back-substitutions.
    If the factorization hits a non-positive pivot and ``ridge`` is true,
    it is retried once with ``a + lam*I`` where ``lam = 1e-10*trace(a)/n``;
    a second failure raises :class:`NotPositiveDefinite`.

    ``a`` must be symmetric within 1e-10 relative to its largest entry.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeMismatch(f"a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ShapeMismatch(f"b has {b.shape[0]} rows, expected {n}")
    scale = np.max(np.abs(a))
    if scale > 0 and np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValueError("a is not symmetric within 1e-10 relative")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        if not ridge:
            raise NotPositiveDefinite("Cholesky pivot <= 0 (ridge disabled)")
        lam = 1e-10 * np.trace(a) / n
        try:
            factor = scipy.linalg.cho_factor(
                a + lam * np.eye(n), lower=True, check_finite=False
            )
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(
                f"Cholesky pivot <= 0 after ridge {lam:.3e}"
            ) from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def polar_factor(a) -> np.ndarray:
    """Orthogonal polar factor ``u @ vt`` of a square matrix ``a = u*s*vt``.

    This is the orthogonal matrix closest to ``a`` in Frobenius norm and
    the maximizer of ``trace(q.T @ a)`` over orthogonal ``q`` (the solution
    of the orthogonal Procrustes problem).  Emits
    :class:`DegenerateRankWarning` when the smallest singular value is
    below ``1e-12`` times the largest; the result is then one of several
    valid maximizers.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"a must be square, got {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(str(exc)) from exc
    if s[0] == 0.0 or s[-1] < 1e-12 * s[0]:
        warnings.warn(
            "polar_factor input is numerically rank deficient; the factor "
            "is not unique",
            DegenerateRankWarning,
            stacklevel=2,
        )
    return u @ vt


def kron(a, b) -> np.ndarray:
    """Kronecker product: block (i, j) of the result is ``a[i, j] * b``.

    Test support only; the training fast path never materializes the
    product of the two dictionary factors.
    """
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def vec(m) -> np.ndarray:
    """Column-order vectorization: stacks the columns of ``m``.

    ``unvec`` is the documented inverse.
    """
    return np.ravel(as_matrix(m, "m"), order="F").copy()


def unvec(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`: reshape a length ``rows*cols`` vector."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != rows * cols:
        raise ShapeMismatch(f"vector of length {v.size} != {rows}*{cols}")
    return v.reshape((rows, cols), order="F").copy()
