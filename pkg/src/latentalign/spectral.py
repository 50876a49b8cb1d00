"""Deterministic singular-value machinery for modality embedding stacks.

Provides the canonical-sign SVD, Gram matrices of observed modalities,
spectral gaps, and the analytic gradient of the leading singular value.
All operations are pure functions of their inputs and safe to call
concurrently.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from latentalign import backends
from latentalign.errors import (
    DegenerateInputError,
    DegenerateSpectrumError,
    InvalidInputError,
    InvalidMaskError,
)

UNIT_NORM_TOL = 1e-9
ORTHO_TOL = 1e-8
NEAR_DEGENERATE_GAP = 1e-10
GRAD_MIN_GAP = 1e-8


def _as_matrix(mat):
    arr = np.asarray(mat, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInputError(f"expected a nonempty 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("matrix has non-finite entries")
    return arr


def _readonly(arr):
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ObservationMask:
    """Set of observed modality identifiers for one instance."""

    ids: tuple

    def __init__(self, ids):
        ids = tuple(ids)
        if len(set(ids)) != len(ids):
            raise InvalidMaskError(f"duplicate modality ids in mask: {ids}")
        object.__setattr__(self, "ids", ids)

    def __contains__(self, modality_id):
        return modality_id in self.ids

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def complement(self, all_ids):
        """Missing modalities, in the slot order of ``all_ids``."""
        return tuple(m for m in all_ids if m not in self.ids)


@dataclass(frozen=True)
class EmbeddingStack:
    """Unit-norm modality embeddings for one instance, one column per slot.

    Attributes
    ----------
    matrix : ndarray, shape (d, k)
        Column ``j`` is the embedding of ``modality_ids[j]``; every column
        has Euclidean norm 1 within 1e-9.
    modality_ids : tuple of str
        Distinct slot labels, in column order.
    """

    matrix: np.ndarray
    modality_ids: tuple

    def __init__(self, matrix, modality_ids):
        mat = _as_matrix(matrix)
        ids = tuple(modality_ids)
        if len(ids) != mat.shape[1]:
            raise InvalidInputError(
                f"{len(ids)} modality ids for {mat.shape[1]} columns")
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"duplicate modality ids: {ids}")
        norms = np.linalg.norm(mat, axis=0)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            worst = ids[int(np.argmax(np.abs(norms - 1.0)))]
            raise InvalidInputError(
                f"column {worst!r} is not unit norm (off by more than {UNIT_NORM_TOL})")
        object.__setattr__(self, "matrix", _readonly(mat))
        object.__setattr__(self, "modality_ids", ids)

    @classmethod
    def from_columns(cls, columns, modality_ids):
        return cls(np.column_stack([np.asarray(c, dtype=float) for c in columns]),
                   modality_ids)

    @classmethod
    def normalized(cls, matrix, modality_ids):
        """Build a stack from arbitrary nonzero columns, normalizing each."""
        mat = _as_matrix(matrix)
        norms = np.linalg.norm(mat, axis=0)
        if np.any(norms == 0.0):
            raise InvalidInputError("cannot normalize a zero column")
        return cls(mat / norms, modality_ids)

    @property
    def d(self):
        return self.matrix.shape[0]

    @property
    def k(self):
        return self.matrix.shape[1]

    def slot_index(self, modality_id):
        try:
            return self.modality_ids.index(modality_id)
        except ValueError:
            raise InvalidMaskError(
                f"unknown modality {modality_id!r}; stack has {self.modality_ids}"
            ) from None

    def column(self, modality_id):
        return self.matrix[:, self.slot_index(modality_id)]

    def submatrix(self, mask):
        """Columns for the masked-in modalities, in original slot order."""
        if len(mask) == 0:
            raise InvalidMaskError("observation mask is empty")
        indices = sorted(self.slot_index(m) for m in mask)
        return self.matrix[:, indices]


class LeadingTriplet(NamedTuple):
    sigma1: float
    u1: np.ndarray
    v1: np.ndarray
    near_degenerate: bool


@dataclass(frozen=True)
class SvdResult:
    """Canonical-sign thin SVD: M = U @ diag(singular_values) @ V.T.

    U is d x p and V is k x p with orthonormal columns (p = min(d, k));
    singular values are nonincreasing and nonnegative.  Signs are fixed so
    each column of U has its largest-magnitude entry nonnegative (ties
    resolved by lowest index), with V flipped to match.
    """

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray

    def __init__(self, left_vectors, singular_values, right_vectors):
        u = np.asarray(left_vectors, dtype=float)
        s = np.asarray(singular_values, dtype=float)
        v = np.asarray(right_vectors, dtype=float)
        p = s.shape[0]
        if u.shape[1] != p or v.shape[1] != p:
            raise InvalidInputError("factor shapes disagree with singular values")
        eye = np.eye(p)
        if (np.max(np.abs(u.T @ u - eye)) > ORTHO_TOL
                or np.max(np.abs(v.T @ v - eye)) > ORTHO_TOL):
            raise InvalidInputError("singular vector factors are not orthonormal")
        if np.any(s < 0.0) or np.any(np.diff(s) > 0.0):
            raise InvalidInputError("singular values must be nonincreasing and >= 0")
        object.__setattr__(self, "left_vectors", _readonly(u))
        object.__setattr__(self, "singular_values", _readonly(s))
        object.__setattr__(self, "right_vectors", _readonly(v))

    @property
    def p(self):
        return self.singular_values.shape[0]

    def reconstruct(self):
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def _canonical_signs(u, v):
    """Flip (u_j, v_j) pairs so the largest-|entry| of each u_j is >= 0."""
    u = u.copy()
    v = v.copy()
    for j in range(u.shape[1]):
        pivot = int(np.argmax(np.abs(u[:, j])))  # argmax takes the lowest index on ties
        if u[pivot, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, v


def decompose(mat):
    """Canonical-sign thin SVD of a finite matrix.

    Reconstruction satisfies ||U diag(s) V^T - M||_F <= 1e-8 (1 + ||M||_F)
    and the result is bit-identical across repeated calls on the same
    backend.
    """
    arr = _as_matrix(mat)
    u, s, v = backends.svd(arr)
    u, v = _canonical_signs(u, v)
    return SvdResult(u, s, v)


def leading_triplet(mat):
    """Leading singular triple (sigma1, u1, v1) with canonical signs.

    sigma1 is the spectral norm.  A gap sigma1 - sigma2 below 1e-10 flags
    the result ``near_degenerate`` (still returned); the all-zero matrix has
    no leading direction and raises :class:`DegenerateInputError`.
    """
    arr = _as_matrix(mat)
    if not np.any(arr):
        raise DegenerateInputError("all-zero matrix has no leading singular direction")
    res = decompose(arr)
    s = res.singular_values
    sigma2 = s[1] if s.shape[0] > 1 else 0.0
    return LeadingTriplet(
        sigma1=float(s[0]),
        u1=res.left_vectors[:, 0].copy(),
        v1=res.right_vectors[:, 0].copy(),
        near_degenerate=bool(s[0] - sigma2 < NEAR_DEGENERATE_GAP),
    )


def gram(stack, mask):
    """Pairwise inner products of the observed modality embeddings.

    Symmetric positive semidefinite with unit diagonal; its eigenvalues are
    the squared singular values of the observed submatrix.
    """
    sub = stack.submatrix(mask)
    g = sub.T @ sub
    return (g + g.T) / 2.0


def spectral_gap(mat):
    """sigma1 - sigma2 of a matrix with min(d, k) >= 2."""
    arr = _as_matrix(mat)
    if min(arr.shape) < 2:
        raise InvalidInputError(
            f"spectral gap needs min(d, k) >= 2, got shape {arr.shape}")
    s = backends.svd(arr)[1]
    return float(s[0] - s[1])


def sigma1_grad(mat):
    """Gradient of the largest singular value: u1 @ v1.T.

    Valid only for a simple leading singular value; a gap below 1e-8 raises
    :class:`DegenerateSpectrumError`.
    """
    arr = _as_matrix(mat)
    if not np.any(arr):
        raise DegenerateSpectrumError("zero matrix: sigma1 is not differentiable")
    res = decompose(arr)
    s = res.singular_values
    sigma2 = s[1] if s.shape[0] > 1 else 0.0
    if s[0] - sigma2 < GRAD_MIN_GAP:
        raise DegenerateSpectrumError(
            f"gap {s[0] - sigma2:.3e} below {GRAD_MIN_GAP}: sigma1 gradient undefined")
    return np.outer(res.left_vectors[:, 0], res.right_vectors[:, 0])
