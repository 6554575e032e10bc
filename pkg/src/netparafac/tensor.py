"""Dense third-order tensor algebra.

Matrices are plain 2-D ``numpy`` arrays. Unfoldings follow the Kolda & Bader
column ordering, so that for a CP model with factors ``A, B, C``::

    unfold(M, 1) == A @ khatri_rao(C, B).T
    unfold(M, 2) == B @ khatri_rao(C, A).T
    unfold(M, 3) == C @ khatri_rao(B, A).T
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with the requested operation."""


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


@dataclass(frozen=True)
class Tensor3:
    """Dense ``I x J x K`` tensor with an optional observation mask.

    ``mask`` is ``True`` where a value was observed. Unobserved positions hold
    ``0.0`` and are never read by masked arithmetic.
    """

    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(f"expected a non-empty 3-d array, got shape {values.shape}")
        mask = self.mask
        if mask is not None:
            mask = np.array(mask, dtype=bool)
            if mask.shape != values.shape:
                raise ShapeError(f"mask shape {mask.shape} != values shape {values.shape}")
            if mask.all():
                mask = None
        observed = values if mask is None else values[mask]
        if not np.all(np.isfinite(observed)):
            raise ValueError("tensor contains non-finite values at observed positions")
        if mask is not None:
            values[~mask] = 0.0
            mask.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_masked(cls, values, mask=None) -> "Tensor3":
        """Build from an array that may carry NaN at unobserved positions."""
        values = np.array(values, dtype=float)
        observed = np.isfinite(values)
        if mask is not None:
            observed &= np.asarray(mask, dtype=bool)
        return cls(np.where(observed, values, 0.0), observed)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def has_mask(self) -> bool:
        return self.mask is not None

    @property
    def observed(self) -> np.ndarray:
        """Boolean array of observed positions (all ``True`` without a mask)."""
        if self.mask is None:
            return np.ones(self.dims, dtype=bool)
        return self.mask

    def __getitem__(self, idx):
        if not isinstance(idx, tuple) or len(idx) != 3:
            raise IndexError("Tensor3 is indexed by an (i, j, k) triple")
        for n, (x, size) in enumerate(zip(idx, self.dims)):
            if not isinstance(x, (int, np.integer)):
                raise IndexError("Tensor3 indices must be integers")
            if not 0 <= x < size:
                raise IndexError(f"index {x} out of range for mode {n + 1} of size {size}")
        if self.mask is not None and not self.mask[idx]:
            return None
        return float(self.values[idx])

    def frob_norm(self) -> float:
        """Frobenius norm over observed entries."""
        return float(np.linalg.norm(self.values))

    def subtensor(self, rows) -> "Tensor3":
        """Select mode-1 slices."""
        rows = np.asarray(rows)
        mask = None if self.mask is None else self.mask[rows]
        return Tensor3(self.values[rows], mask)


def _as_array(t) -> np.ndarray:
    return t.values if isinstance(t, Tensor3) else np.asarray(t, dtype=float)


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization (1-based), Kolda & Bader column order."""
    n = _check_mode(mode)
    x = _as_array(t)
    if x.ndim != 3:
        raise ShapeError(f"expected a 3-d tensor, got shape {x.shape}")
    return np.reshape(np.moveaxis(x, n, 0), (x.shape[n], -1), order="F")


def fold(m, mode: int, dims) -> Tensor3:
    """Inverse of :func:`unfold`."""
    n = _check_mode(mode)
    m = np.asarray(m, dtype=float)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ShapeError("dims must have three entries")
    rest = [d for k, d in enumerate(dims) if k != n]
    if m.shape != (dims[n], rest[0] * rest[1]):
        raise ShapeError(
            f"matrix of shape {m.shape} cannot be folded in mode {mode} into {dims}"
        )
    full = np.reshape(m, (dims[n], *rest), order="F")
    return Tensor3(np.moveaxis(full, 0, n))


def khatri_rao(p, q) -> np.ndarray:
    """Column-wise Kronecker product: column ``r`` is ``kron(p[:, r], q[:, r])``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 2 or q.ndim != 2:
        raise ShapeError("khatri_rao expects two matrices")
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"column counts differ: {p.shape[1]} vs {q.shape[1]}")
    return np.einsum("ir,jr->ijr", p, q).reshape(p.shape[0] * q.shape[0], p.shape[1])


def pinv(m, rtol: Optional[float] = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via the SVD.

    Singular values below ``rtol * sigma_max`` are treated as zero, with
    ``rtol = 1e-12 * max(rows, cols)`` by default.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ShapeError("pinv expects a matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("pinv input contains non-finite values")
    if m.size == 0:
        return np.zeros(m.T.shape)
    if rtol is None:
        rtol = 1e-12 * max(m.shape)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cutoff = rtol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def lsq_rows(targets, design) -> np.ndarray:
    """Solve ``X @ design ~= targets`` for ``X`` in the least-squares sense.

    ``targets`` is ``P x D`` and ``design`` is ``R x D``; returns ``P x R``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if targets.shape[1] != design.shape[1]:
        raise ShapeError(
            f"targets have {targets.shape[1]} columns but design has {design.shape[1]}"
        )
    return targets @ pinv(design)


def masked_lsq_rows(targets, design, mask) -> np.ndarray:
    """Row-wise least squares using only observed target entries.

    Each row ``p`` solves ``x_p @ design[:, obs_p] ~= targets[p, obs_p]``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    design = np.atleast_2d(np.asarray(design, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if targets.shape[1] != design.shape[1] or mask.shape != targets.shape:
        raise ShapeError("targets, design and mask shapes are inconsistent")
    out = np.zeros((targets.shape[0], design.shape[0]))
    for p in range(targets.shape[0]):
        obs = mask[p]
        if not obs.any():
            raise ValueError(f"row {p} has no observed entries")
        out[p] = targets[p, obs] @ pinv(design[:, obs])
    return out
