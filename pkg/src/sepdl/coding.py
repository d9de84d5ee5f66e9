"""Sparse coding of 2D patches against a dictionary pair.

The workhorse is a batched 2D orthogonal matching pursuit: at every step
the atom pair (i, j) with the largest residual correlation
``|left[:, i].T @ R @ right[:, j]|`` is selected and the coefficients of
all selected pairs are jointly refit by least squares.  The restricted
normal equations are assembled from the two small Grams
``left.T @ left`` and ``right.T @ right`` (entries of the Kronecker
dictionary's Gram factor into products of their entries), so the
Kronecker dictionary is never materialized.  One corrected-seminormal
refinement step, computed from the explicit 2D residual, recovers the
accuracy a QR-based solve would give on ill-conditioned supports.

For orthonormal pairs the restricted Gram is the identity, greedy
selection reduces to picking transform-domain entries in decreasing
magnitude, and a sort-based fast path is used.

``omp1d_reference`` is an intentionally independent 1D OMP (explicit
residuals, SVD-based least squares) used by the tests as an oracle on the
materialized Kronecker dictionary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .linalg import ShapeMismatch, as_matrix
from .update import DictionaryPair, DictMode


class DictionaryShapeMismatch(ShapeMismatch):
    """Signal and dictionary pair shapes are inconsistent."""


class NotOrthonormalMode(ValueError):
    """Operation requires an orthonormal-mode dictionary pair."""


class CoherenceBreakdown(ArithmeticError):
    """The restricted least-squares Gram stopped being positive definite.

    Selected atom pairs became (numerically) linearly dependent; carries
    the greedy step at which it happened.
    """

    def __init__(self, step: int):
        super().__init__(f"restricted Gram not positive definite at step {step}")
        self.step = step


@dataclass(frozen=True)
class FixedSparsity:
    """Stop after exactly ``s`` atom pairs (fewer if the residual hits 0)."""

    s: int

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("s must be >= 1")


@dataclass(frozen=True)
class ErrorDriven:
    """Stop once the residual Frobenius norm drops to ``epsilon``, with a
    hard cap of ``s_cap`` pairs."""

    epsilon: float
    s_cap: int

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.s_cap < 1:
            raise ValueError("s_cap must be >= 1")


CodingStop = Union[FixedSparsity, ErrorDriven]


@dataclass(frozen=True)
class SparseCode:
    """Sparse n1 x n2 coefficient matrix as (row, col, value) triplets.

    Triplets are ordered by selection time; positions are distinct and
    values nonzero.
    """

    n1: int
    n2: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp)
        cols = np.asarray(self.cols, dtype=np.intp)
        values = np.asarray(self.values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise ShapeMismatch("rows, cols, values must be 1-D and equally long")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n1:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n2:
                raise ValueError("col index out of range")
            if len(set(zip(rows.tolist(), cols.tolist()))) != rows.size:
                raise ValueError("duplicate (row, col) positions")
            if not np.all(np.isfinite(values)) or np.any(values == 0.0):
                raise ValueError("values must be finite and nonzero")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.rows.size

    @property
    def triplets(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n1, self.n2))
        out[self.rows, self.cols] = self.values
        return out


@dataclass
class BatchCodes:
    """Codes for a batch of patches in padded-array form.

    ``rows/cols/values`` are (count, s_max); entries past ``counts[k]``
    are padding (values padded with zero).  ``residual_sq`` holds the
    squared Frobenius norm of each patch's final coding residual.
    """

    n1: int
    n2: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    residual_sq: np.ndarray

    def __len__(self) -> int:
        return self.counts.shape[0]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((len(self), self.n1, self.n2))
        if self.rows.shape[1]:
            b = np.arange(len(self))[:, None]
            out[b, self.rows, self.cols] = self.values
        return out

    def to_codes(self) -> list[SparseCode]:
        out = []
        for k in range(len(self)):
            c = int(self.counts[k])
            r, c_, v = self.rows[k, :c], self.cols[k, :c], self.values[k, :c]
            keep = v != 0.0
            out.append(SparseCode(self.n1, self.n2, r[keep], c_[keep], v[keep]))
        return out

    def scale_columns(self, factors: np.ndarray) -> None:
        """Multiply the value of every triplet in code column j by factors[j]."""
        if self.rows.shape[1]:
            self.values *= factors[self.cols]

    def scale_rows(self, factors: np.ndarray) -> None:
        """Multiply the value of every triplet in code row i by factors[i]."""
        if self.rows.shape[1]:
            self.values *= factors[self.rows]

    @property
    def values_energy_sq(self) -> float:
        return float(np.sum(self.values * self.values))


def _check_pair(y_shape: tuple[int, int], pair: DictionaryPair) -> None:
    if y_shape[0] != pair.m or y_shape[1] != pair.m:
        raise DictionaryShapeMismatch(
            f"patch is {y_shape[0]}x{y_shape[1]}, dictionary expects {pair.m}x{pair.m}"
        )


def omp2d_batch(patches, pair: DictionaryPair, stop: CodingStop) -> BatchCodes:
    """2D-OMP over a batch of m x m patches.

    Equivalent, support and coefficients alike, to 1D OMP on the
    materialized Kronecker dictionary applied to column-vectorized
    patches.  Ties in the greedy selection break to the lowest (row, col)
    in lexicographic order.
    """
    y = np.asarray(patches, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ShapeMismatch(f"patches must be (count, m, m), got {y.shape}")
    _check_pair(y.shape[1:], pair)
    if isinstance(stop, FixedSparsity):
        if stop.s > pair.n1 * pair.n2:
            raise ValueError(f"s={stop.s} exceeds the {pair.n1}x{pair.n2} code size")
        s_max, eps = stop.s, None
    elif isinstance(stop, ErrorDriven):
        s_max, eps = min(stop.s_cap, pair.n1 * pair.n2), stop.epsilon
    else:
        raise TypeError(f"unsupported stop rule: {stop!r}")
    if pair.mode is DictMode.ORTHONORMAL:
        return _ortho_greedy_batch(y, pair, s_max, eps)
    return _omp2d_general_batch(y, pair, s_max, eps)


def omp2d(patch, pair: DictionaryPair, stop: CodingStop) -> SparseCode:
    """2D-OMP for a single patch; see :func:`omp2d_batch`."""
    y = as_matrix(patch, "patch")
    return omp2d_batch(y[None], pair, stop).to_codes()[0]


def _dyad_recon(d1, d2, rr, cc, x) -> np.ndarray:
    """Batched ``sum_a x[b, a] * outer(d1[:, rr[b, a]], d2[:, cc[b, a]])``."""
    left = d1[:, rr].transpose(1, 0, 2) * x[:, None, :]    # (b, m, k)
    return np.matmul(left, d2[:, cc].transpose(1, 2, 0))   # (b, m, m)


def _omp2d_general_batch(y, pair, s_max, eps) -> BatchCodes:
    d1, d2 = pair.left, pair.right
    count, m, _ = y.shape
    n1, n2 = pair.n1, pair.n2
    g1 = d1.T @ d1
    g2 = d2.T @ d2
    # transform-domain signal: c0[k] = d1.T @ y[k] @ d2
    c0 = np.matmul(np.matmul(y, d2).transpose(0, 2, 1), d1).transpose(0, 2, 1)
    corr = c0.reshape(count, n1 * n2).copy()
    ysq = np.einsum("kij,kij->k", y, y)

    rows = np.zeros((count, s_max), dtype=np.intp)
    cols = np.zeros((count, s_max), dtype=np.intp)
    values = np.zeros((count, s_max))
    counts = np.zeros(count, dtype=np.intp)
    residual_sq = ysq.copy()
    selected = np.zeros((count, n1 * n2), dtype=bool)
    active = np.ones(count, dtype=bool)
    if eps is not None:
        active &= residual_sq > eps * eps

    for step in range(s_max):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        a = np.abs(corr[idx])
        a[selected[idx]] = -1.0
        flat = np.argmax(a, axis=1)
        peak = a[np.arange(idx.size), flat]
        # a residual orthogonal to every remaining atom pair cannot improve
        exhausted = peak <= 0.0
        if np.any(exhausted):
            active[idx[exhausted]] = False
            idx = idx[~exhausted]
            flat = flat[~exhausted]
            if idx.size == 0:
                break
        ri, ci = np.divmod(flat, n2)
        rows[idx, counts[idx]] = ri
        cols[idx, counts[idx]] = ci
        selected[idx, flat] = True
        counts[idx] += 1
        k = step + 1

        rr = rows[idx, :k]
        cc = cols[idx, :k]
        gram = g1[rr[:, :, None], rr[:, None, :]] * g2[cc[:, :, None], cc[:, None, :]]
        rhs = c0[idx[:, None], rr, cc]
        try:
            np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise CoherenceBreakdown(k) from None
        x = np.linalg.solve(gram, rhs)

        # explicit residual, then one corrected-seminormal refinement step
        resid = y[idx] - _dyad_recon(d1, d2, rr, cc, x)
        proj = np.matmul(np.matmul(resid, d2).transpose(0, 2, 1), d1).transpose(0, 2, 1)
        dx = np.linalg.solve(gram, proj[np.arange(idx.size)[:, None], rr, cc])
        x += dx
        values[idx, :k] = x

        resid = y[idx] - _dyad_recon(d1, d2, rr, cc, x)
        proj = np.matmul(np.matmul(resid, d2).transpose(0, 2, 1), d1).transpose(0, 2, 1)
        corr[idx] = proj.reshape(idx.size, -1)
        residual_sq[idx] = np.einsum("kij,kij->k", resid, resid)

        if eps is not None:
            active[idx] &= residual_sq[idx] > eps * eps
        else:
            active[idx] &= residual_sq[idx] > 0.0

    return BatchCodes(n1, n2, rows, cols, values, counts, residual_sq)


def _ortho_greedy_batch(y, pair, s_max, eps) -> BatchCodes:
    """Greedy coding against an orthonormal pair.

    With orthonormal factors the transform coefficients are the exact
    jointly-refit values and unselected correlations never change, so the
    greedy loop collapses to a stable descending sort of the transform
    magnitudes with Parseval residual bookkeeping.
    """
    d1, d2 = pair.left, pair.right
    count, m, _ = y.shape
    a = np.matmul(np.matmul(y, d2).transpose(0, 2, 1), d1).transpose(0, 2, 1)
    flat = a.reshape(count, m * m)
    order = np.argsort(-np.abs(flat), axis=1, kind="stable")
    svals = np.take_along_axis(flat, order, axis=1)
    ysq = np.einsum("kij,kij->k", y, y)
    cum = np.cumsum(svals * svals, axis=1)
    resid_after = ysq[:, None] - cum

    if eps is not None:
        need = resid_after > eps * eps
        n_keep = np.minimum(need.sum(axis=1) + 1, s_max)
        n_keep = np.where(ysq <= eps * eps, 0, n_keep)
    else:
        n_keep = np.full(count, s_max, dtype=np.intp)
    # never keep exact zeros (residual already flat at that point)
    nz = np.abs(svals) > 0.0
    n_keep = np.minimum(n_keep, nz.sum(axis=1))

    kmax = int(n_keep.max()) if count else 0
    rows_f = order[:, :kmax]
    values = np.where(
        np.arange(kmax)[None, :] < n_keep[:, None], svals[:, :kmax], 0.0
    )
    ri, ci = np.divmod(rows_f, m)
    take = np.arange(kmax)[None, :] < n_keep[:, None]
    residual_sq = np.where(
        n_keep > 0,
        resid_after[np.arange(count), np.maximum(n_keep - 1, 0)],
        ysq,
    )
    residual_sq = np.maximum(residual_sq, 0.0)
    return BatchCodes(
        m, m,
        np.where(take, ri, 0), np.where(take, ci, 0), values,
        n_keep.astype(np.intp), residual_sq,
    )


def threshold_code_batch(patches, pair: DictionaryPair, s: int) -> BatchCodes:
    """Keep the ``s`` largest-magnitude transform coefficients per patch.

    Optimal fixed-sparsity coding for orthonormal pairs.  Ties break to
    the smaller row index, then the smaller column index.
    """
    if pair.mode is not DictMode.ORTHONORMAL:
        raise NotOrthonormalMode("threshold coding requires an orthonormal pair")
    y = np.asarray(patches, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    _check_pair(y.shape[1:], pair)
    if not 1 <= s <= pair.m * pair.m:
        raise ValueError(f"s must be in [1, {pair.m * pair.m}]")
    return _ortho_greedy_batch(y, pair, s, None)


def threshold_code(patch, pair: DictionaryPair, s: int) -> SparseCode:
    """Single-patch :func:`threshold_code_batch`."""
    y = as_matrix(patch, "patch")
    return threshold_code_batch(y[None], pair, s).to_codes()[0]


def omp1d_reference(y, dictionary, stop: CodingStop) -> tuple[list[int], np.ndarray]:
    """Plain 1D OMP, used by tests as an independent oracle.

    Greedy max-correlation selection with an SVD least-squares refit on
    the explicit residual at every step.  Returns the selected column
    indices in selection order and their final coefficients.
    """
    d = as_matrix(dictionary, "dictionary")
    yv = np.asarray(y, dtype=np.float64).ravel()
    if yv.shape[0] != d.shape[0]:
        raise DictionaryShapeMismatch(
            f"signal length {yv.shape[0]} != dictionary rows {d.shape[0]}"
        )
    if isinstance(stop, FixedSparsity):
        s_max, eps = stop.s, None
    elif isinstance(stop, ErrorDriven):
        s_max, eps = stop.s_cap, stop.epsilon
    else:
        raise TypeError(f"unsupported stop rule: {stop!r}")
    s_max = min(s_max, d.shape[1])

    support: list[int] = []
    coef = np.zeros(0)
    resid = yv.copy()
    if eps is not None and np.linalg.norm(resid) <= eps:
        return support, coef
    for _ in range(s_max):
        c = d.T @ resid
        c[support] = 0.0
        j = int(np.argmax(np.abs(c)))
        if c[j] == 0.0:
            break
        support.append(j)
        sub = d[:, support]
        coef, _, rank, _ = np.linalg.lstsq(sub, yv, rcond=None)
        if rank < len(support):
            raise CoherenceBreakdown(len(support))
        resid = yv - sub @ coef
        r = float(np.linalg.norm(resid))
        if eps is not None and r <= eps:
            break
        if r == 0.0:
            break
    return support, coef
