"""Dictionary pairs, per-shard partial sums, and closed-form updates.

A separable dictionary is the pair (left, right) applied to a patch code
as ``left @ code @ right.T``.  Two flavors are supported:

* ``GENERAL``: unit-norm columns, updated by a least-squares solve of the
  accumulated Gram/cross sums followed by column re-normalization (the
  normalization diagonal is returned so the caller can rescale codes).
* ``ORTHONORMAL``: square orthogonal factors, updated by the polar factor
  of an accumulated cross matrix (orthogonal Procrustes).

Partial sums are the per-worker accumulations whose totals determine the
update; their sizes depend only on the patch and dictionary dimensions,
never on the number of samples.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linalg import ShapeMismatch, as_matrix, chol_spd_solve, polar_factor

NORM_TOL = 1e-12
ORTHO_TOL = 1e-10


class DictMode(enum.Enum):
    GENERAL = "general"
    ORTHONORMAL = "orthonormal"


class Side(enum.Enum):
    """Which dictionary factor a phase or scaling refers to."""

    LEFT = "left"
    RIGHT = "right"


class ZeroColumn(ArithmeticError):
    """A dictionary column came out of the solve with ~zero norm.

    Happens when an atom is unused by every code in the batch.  Carries
    the indices so the caller can apply its replacement policy.
    """

    def __init__(self, side: Side, indices: list[int]):
        super().__init__(f"{side.value} dictionary columns {indices} have zero norm")
        self.side = side
        self.indices = indices


@dataclass(frozen=True)
class DictionaryPair:
    """Left (m x n1) and right (m x n2) dictionary factors.

    Column norms are validated at construction: unit columns within 1e-12
    in GENERAL mode, orthonormal factors within 1e-10 (and n1 = n2 = m)
    in ORTHONORMAL mode.
    """

    mode: DictMode
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = as_matrix(self.left, "left")
        right = as_matrix(self.right, "right")
        if left.shape[0] != right.shape[0]:
            raise ShapeMismatch(
                f"left and right must share the patch side: {left.shape} vs {right.shape}"
            )
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        m = left.shape[0]
        if self.mode is DictMode.ORTHONORMAL:
            if left.shape[1] != m or right.shape[1] != m:
                raise ShapeMismatch("orthonormal mode requires square factors")
            for name, d in (("left", left), ("right", right)):
                if np.max(np.abs(d.T @ d - np.eye(m))) > ORTHO_TOL:
                    raise ValueError(f"{name} factor is not orthonormal within {ORTHO_TOL}")
        else:
            for name, d in (("left", left), ("right", right)):
                if np.max(np.abs(np.linalg.norm(d, axis=0) - 1.0)) > NORM_TOL:
                    raise ValueError(f"{name} columns are not unit norm within {NORM_TOL}")

    @property
    def m(self) -> int:
        return self.left.shape[0]

    @property
    def n1(self) -> int:
        return self.left.shape[1]

    @property
    def n2(self) -> int:
        return self.right.shape[1]


@dataclass(frozen=True)
class NormScaling:
    """Positive diagonal that renormalized a dictionary's columns.

    ``diag[j]`` multiplies unnormalized column j to make it unit norm;
    codes are compensated with the inverse so reconstructions (and the
    sparsity pattern) are unchanged.
    """

    side: Side
    diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=np.float64)
        if d.ndim != 1 or not np.all(d > 0):
            raise ValueError("scaling diagonal must be 1-D and strictly positive")
        object.__setattr__(self, "diag", d)


@dataclass
class PartialSums:
    """One worker's accumulated matrices for a half-iteration.

    GENERAL mode carries ``gram`` (n1 x n1 for the left step, n2 x n2 for
    the right step) and ``cross`` (n1 x m, resp. n2 x m).  ORTHONORMAL
    mode needs only the m x m ``cross`` matrix (``gram`` is None).

    The scalar fields ride along for metrics and the dead-atom policy:
    ``coding_residual_sq`` is the summed squared coding residual of the
    shard, ``code_energy_sq`` the summed squared code values,
    ``worst_index``/``worst_residual_sq`` identify the worst-coded sample
    (global index; -1 for an empty shard).
    """

    phase: Side
    node_id: int
    sample_count: int
    gram: Optional[np.ndarray]
    cross: np.ndarray
    coding_residual_sq: float = 0.0
    code_energy_sq: float = 0.0
    worst_index: int = -1
    worst_residual_sq: float = 0.0

    def __post_init__(self):
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        if self.gram is not None:
            g = as_matrix(self.gram, "gram")
            if g.shape[0] != g.shape[1]:
                raise ShapeMismatch("gram must be square")
            scale = np.max(np.abs(g))
            if scale > 0 and np.max(np.abs(g - g.T)) > 1e-10 * scale:
                raise ValueError("gram is not symmetric within 1e-10")
            self.gram = g
        self.cross = as_matrix(self.cross, "cross")


def _dense_codes(codes, n1: int, n2: int) -> np.ndarray:
    """Stack codes into a dense (count, n1, n2) array."""
    from .coding import BatchCodes, SparseCode  # local import avoids a cycle

    if isinstance(codes, BatchCodes):
        if codes.n1 != n1 or codes.n2 != n2:
            raise ShapeMismatch(
                f"codes are {codes.n1}x{codes.n2}, dictionary expects {n1}x{n2}"
            )
        return codes.to_dense()
    out = np.zeros((len(codes), n1, n2))
    for k, code in enumerate(codes):
        if not isinstance(code, SparseCode):
            raise TypeError(f"expected SparseCode, got {type(code).__name__}")
        if code.n1 != n1 or code.n2 != n2:
            raise ShapeMismatch(
                f"code {k} is {code.n1}x{code.n2}, dictionary expects {n1}x{n2}"
            )
        out[k, code.rows, code.cols] = code.values
    return out


def _patch_array(patches) -> np.ndarray:
    arr = patches.patches if hasattr(patches, "patches") else np.asarray(patches, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ShapeMismatch(f"patches must be (count, m, m), got {arr.shape}")
    return arr


def accumulate_left(patches, codes, right_dict) -> PartialSums:
    """Accumulate the left-step sums over a shard.

    ``gram = sum_k X_k @ (right.T @ right) @ X_k.T`` and
    ``cross = sum_k (X_k @ right.T) @ Y_k.T``, using the small Gram of the
    right factor instead of forming each ``X_k @ right.T`` product's Gram
    explicitly.  Samples are reduced in ascending index order.
    """
    right = as_matrix(right_dict, "right_dict")
    y = _patch_array(patches)
    m = right.shape[0]
    n2 = right.shape[1]
    if y.shape[1] != m:
        raise ShapeMismatch(f"patches are {y.shape[1]}x{y.shape[2]}, dictionary expects m={m}")
    x = _dense_codes_infer(codes, n2, axis=1)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} patches vs {x.shape[0]} codes")
    n1 = x.shape[1]
    if x.shape[0] == 0:
        return PartialSums(Side.LEFT, 0, 0, np.zeros((n1, n1)), np.zeros((n1, m)))
    g2 = right.T @ right
    xg2 = np.matmul(x, g2)
    gram = np.tensordot(xg2, x, axes=([0, 2], [0, 2]))
    t = np.matmul(x, right.T)
    cross = np.tensordot(t, y, axes=([0, 2], [0, 2]))
    return PartialSums(Side.LEFT, 0, x.shape[0], gram, cross)


def accumulate_right(patches, codes, left_dict) -> PartialSums:
    """Accumulate the right-step sums over a shard.

    ``gram = sum_k X_k.T @ (left.T @ left) @ X_k`` and
    ``cross = sum_k (left @ X_k).T @ Y_k``, via the left factor's Gram.
    """
    left = as_matrix(left_dict, "left_dict")
    y = _patch_array(patches)
    m = left.shape[0]
    n1 = left.shape[1]
    if y.shape[1] != m:
        raise ShapeMismatch(f"patches are {y.shape[1]}x{y.shape[2]}, dictionary expects m={m}")
    x = _dense_codes_infer(codes, n1, axis=0)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} patches vs {x.shape[0]} codes")
    n2 = x.shape[2]
    if x.shape[0] == 0:
        return PartialSums(Side.RIGHT, 0, 0, np.zeros((n2, n2)), np.zeros((n2, m)))
    g1 = left.T @ left
    g1x = np.matmul(g1, x)
    gram = np.tensordot(x, g1x, axes=([0, 1], [0, 1]))
    d1ty = np.matmul(left.T, y)
    cross = np.tensordot(x, d1ty, axes=([0, 1], [0, 1]))
    return PartialSums(Side.RIGHT, 0, x.shape[0], gram, cross)


def accumulate_left_ortho(patches, codes, right_dict) -> PartialSums:
    """Orthonormal-mode left step: ``cross = sum_k Y_k @ right @ X_k.T``."""
    right = as_matrix(right_dict, "right_dict")
    y = _patch_array(patches)
    m = right.shape[0]
    x = _dense_codes_infer(codes, m, axis=1)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} patches vs {x.shape[0]} codes")
    if x.shape[0] == 0:
        return PartialSums(Side.LEFT, 0, 0, None, np.zeros((m, m)))
    yd2 = np.matmul(y, right)
    cross = np.tensordot(yd2, x, axes=([0, 2], [0, 2]))
    return PartialSums(Side.LEFT, 0, x.shape[0], None, cross)


def accumulate_right_ortho(patches, codes, left_dict) -> PartialSums:
    """Orthonormal-mode right step: ``cross = sum_k Y_k.T @ left @ X_k``."""
    left = as_matrix(left_dict, "left_dict")
    y = _patch_array(patches)
    m = left.shape[0]
    x = _dense_codes_infer(codes, m, axis=0)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} patches vs {x.shape[0]} codes")
    if x.shape[0] == 0:
        return PartialSums(Side.RIGHT, 0, 0, None, np.zeros((m, m)))
    ytd1 = np.matmul(y.transpose(0, 2, 1), left)
    cross = np.tensordot(ytd1, x, axes=([0, 1], [0, 1]))
    return PartialSums(Side.RIGHT, 0, x.shape[0], None, cross)


def _dense_codes_infer(codes, fixed: int, axis: int) -> np.ndarray:
    """Dense (count, n1, n2) codes, checking the constrained axis size."""
    from .coding import BatchCodes

    if isinstance(codes, BatchCodes):
        n1, n2 = codes.n1, codes.n2
    elif len(codes) > 0:
        n1, n2 = codes[0].n1, codes[0].n2
    else:
        # nothing to infer the free axis from; an empty shard contributes zeros
        n1 = n2 = fixed
    want = n2 if axis == 1 else n1
    if want != fixed:
        raise ShapeMismatch(f"code axis {axis} is {want}, dictionary expects {fixed}")
    return _dense_codes(codes, n1, n2)


def _normalize_columns(
    unnorm: np.ndarray,
    side: Side,
    replacement: Optional[Callable[[int], np.ndarray]],
) -> tuple[np.ndarray, NormScaling]:
    norms = np.linalg.norm(unnorm, axis=0)
    dead = np.flatnonzero(norms < NORM_TOL)
    if dead.size and replacement is None:
        raise ZeroColumn(side, dead.tolist())
    out = unnorm.copy()
    scale = np.ones_like(norms)
    alive = norms >= NORM_TOL
    out[:, alive] = unnorm[:, alive] / norms[alive]
    scale[alive] = 1.0 / norms[alive]
    for j in dead:
        col = np.asarray(replacement(int(j)), dtype=np.float64).ravel()
        if col.shape[0] != unnorm.shape[0]:
            raise ShapeMismatch("replacement column has the wrong length")
        nrm = np.linalg.norm(col)
        if nrm < NORM_TOL:
            raise ZeroColumn(side, [int(j)])
        out[:, j] = col / nrm
        scale[j] = 1.0
    return out, NormScaling(side, scale)


def update_right_general(
    gram, cross, *, ridge: bool = True,
    replacement: Optional[Callable[[int], np.ndarray]] = None,
) -> tuple[np.ndarray, NormScaling]:
    """Closed-form right-factor update from reduced right-step sums.

    Solves ``gram @ Dt = cross`` for the transposed unnormalized factor,
    then renormalizes columns.  The returned scaling's inverse must be
    applied to code columns to keep reconstructions unchanged.  A column
    with ~zero norm raises :class:`ZeroColumn` unless ``replacement``
    supplies a substitute column for the dead index.
    """
    solved = chol_spd_solve(gram, cross, ridge=ridge)
    return _normalize_columns(solved.T, Side.RIGHT, replacement)


def update_left_general(
    gram, cross, *, ridge: bool = True,
    replacement: Optional[Callable[[int], np.ndarray]] = None,
) -> tuple[np.ndarray, NormScaling]:
    """Closed-form left-factor update from reduced left-step sums.

    ``cross`` stores ``sum_k T_k @ Y_k.T``, so the unnormalized factor is
    the transpose of ``gram^-1 @ cross``.  Codes are compensated on rows:
    ``X <- inv(W) @ X``.
    """
    solved = chol_spd_solve(gram, cross, ridge=ridge)
    return _normalize_columns(solved.T, Side.LEFT, replacement)


def update_right_ortho(cross) -> np.ndarray:
    """Procrustes right-factor update: polar factor of the m x m cross sum."""
    return polar_factor(cross)


def update_left_ortho(cross) -> np.ndarray:
    """Procrustes left-factor update: polar factor of the m x m cross sum."""
    return polar_factor(cross)
