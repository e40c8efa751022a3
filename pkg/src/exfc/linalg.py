"""Numerical kernels for prototype statistics and Mahalanobis scoring.

Vectors are 1-D ``float64`` arrays and matrices 2-D square ``float64``
arrays. Everything is accumulated in double precision whatever the input
dtype, because merging covariances is prone to cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_solve

from .errors import (
    DegenerateVectorError,
    DimensionError,
    EmptyInputError,
    NotCovarianceError,
    SingularMatrixError,
)

# Pivots at or below this fraction of the largest diagonal entry are treated
# as zero; rank-deficient PSD input otherwise slips through with ~1e-16 pivots.
PIVOT_RTOL = 1e-10


def _frozen(a: NDArray) -> NDArray:
    a.setflags(write=False)
    return a


def as_vector(x: ArrayLike) -> NDArray[np.float64]:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def as_matrix(m: ArrayLike) -> NDArray[np.float64]:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise DimensionError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def as_batch(batch) -> NDArray[np.float64]:
    """Stack a batch of vectors into an ``(n, d)`` array, checking dims."""
    if isinstance(batch, np.ndarray):
        arr = np.asarray(batch, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
    else:
        rows = [np.asarray(v, dtype=np.float64) for v in batch]
        if not rows:
            raise EmptyInputError("batch is empty")
        dims = {r.shape for r in rows}
        if len(dims) != 1:
            raise DimensionError(f"batch mixes vector shapes {sorted(dims)}")
        arr = np.stack(rows)
    if arr.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyInputError("batch is empty")
    if arr.shape[1] == 0:
        raise DimensionError("batch vectors have zero length")
    return arr


@dataclass(frozen=True)
class MomentPack:
    """Sufficient statistics of a sample: count, mean and scatter matrix.

    ``m2`` is the sum of outer products of deviations from ``mean``.
    """

    count: int
    mean: NDArray[np.float64]
    m2: NDArray[np.float64]

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        m2 = np.array(self.m2, dtype=np.float64)
        if mean.ndim != 1 or m2.shape != (mean.size, mean.size):
            raise DimensionError(
                f"mean shape {mean.shape} incompatible with m2 shape {m2.shape}"
            )
        if self.count < 0:
            raise ValueError("count must be non-negative")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "m2", _frozen(m2))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def empty(cls, dim: int) -> "MomentPack":
        return cls(0, np.zeros(dim), np.zeros((dim, dim)))

    def covariance(self) -> NDArray[np.float64]:
        """Unbiased covariance; the zero matrix for fewer than two samples."""
        if self.count < 2:
            return np.zeros((self.dim, self.dim))
        return self.m2 / (self.count - 1)


def batch_moments(batch) -> MomentPack:
    """Two-pass count, mean and scatter of a non-empty batch."""
    x = as_batch(batch)
    mean = x.mean(axis=0)
    dev = x - mean
    m2 = dev.T @ dev
    return MomentPack(x.shape[0], mean, (m2 + m2.T) * 0.5)


def merge_moments(a: MomentPack, b: MomentPack) -> MomentPack:
    """Exact pooled moments of two disjoint samples (Chan et al. update)."""
    if a.dim != b.dim:
        raise DimensionError(f"cannot merge moments of dim {a.dim} and {b.dim}")
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.m2 + b.m2 + np.outer(delta, delta) * (a.count * b.count / n)
    return MomentPack(n, mean, (m2 + m2.T) * 0.5)


def merge_moments_equal_weight(a: MomentPack, b: MomentPack) -> MomentPack:
    """Average means and covariances entrywise with weight 1/2 each.

    The count still accumulates; ``m2`` is rescaled so that
    ``covariance()`` returns the averaged covariance.
    """
    if a.dim != b.dim:
        raise DimensionError(f"cannot merge moments of dim {a.dim} and {b.dim}")
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    mean = 0.5 * (a.mean + b.mean)
    cov = 0.5 * (a.covariance() + b.covariance())
    return MomentPack(n, mean, cov * (n - 1))


def shrink(cov: ArrayLike, gamma1: float = 1.0, gamma2: float = 1.0) -> NDArray[np.float64]:
    """Two-parameter shrinkage toward scaled identity and off-diagonal mean.

    Returns ``cov + gamma1*V1*I + gamma2*V2*(J - I)`` where ``V1`` is the mean
    variance and ``V2`` the mean off-diagonal covariance.
    """
    c = as_matrix(cov)
    if gamma1 < 0 or gamma2 < 0:
        raise ValueError("shrinkage coefficients must be non-negative")
    d = c.shape[0]
    diag = np.diag(c)
    v1 = diag.mean()
    v2 = (c.sum() - diag.sum()) / (d * (d - 1)) if d > 1 else 0.0
    out = c + gamma2 * v2 * (np.ones((d, d)) - np.eye(d))
    out[np.diag_indices(d)] += gamma1 * v1
    return (out + out.T) * 0.5


def normalize_corr(cov: ArrayLike, epsilon: float = 1e-8) -> NDArray[np.float64]:
    """Rescale a covariance by its standard deviations (correlation form)."""
    c = as_matrix(cov)
    diag = np.diag(c)
    if np.any(diag < 0):
        i = int(np.argmin(diag))
        raise NotCovarianceError(f"negative variance {diag[i]!r} at index {i}")
    sd = np.sqrt(diag)
    out = c / (np.outer(sd, sd) + epsilon)
    return (out + out.T) * 0.5


@dataclass(frozen=True)
class SpdInverse:
    inverse: NDArray[np.float64]
    pivots: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "inverse", _frozen(np.asarray(self.inverse)))
        object.__setattr__(self, "pivots", _frozen(np.asarray(self.pivots)))

    @property
    def source_dim(self) -> int:
        return self.inverse.shape[0]

    @property
    def smallest_pivot(self) -> float:
        return float(self.pivots.min())


def _ldl_pivots(m: NDArray) -> NDArray:
    """Pivots of unpivoted symmetric elimination, stopping at the first bad one."""
    a = m.copy()
    d = a.shape[0]
    piv = np.empty(d)
    for k in range(d):
        piv[k] = a[k, k]
        if not piv[k] > 0:
            return piv[: k + 1]
        col = a[k + 1 :, k] / piv[k]
        a[k + 1 :, k + 1 :] -= np.outer(col, a[k, k + 1 :])
    return piv


def invert_spd(m: ArrayLike, rtol: float = PIVOT_RTOL) -> SpdInverse:
    """Invert a symmetric positive-definite matrix through its Cholesky factor.

    Raises
    ------
    SingularMatrixError
        If a pivot is non-positive or below ``rtol`` times the largest
        diagonal entry. The error carries the smallest pivot found.
    """
    a = as_matrix(m)
    a = (a + a.T) * 0.5
    scale = max(float(np.abs(np.diag(a)).max()), np.finfo(float).tiny)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        piv = _ldl_pivots(a)
        smallest = float(piv.min())
        raise SingularMatrixError(
            f"matrix is not positive definite: smallest pivot {smallest:.3e}",
            smallest,
        ) from None
    pivots = np.diag(lower) ** 2
    smallest = float(pivots.min())
    if not smallest > rtol * scale:
        raise SingularMatrixError(
            f"matrix is numerically singular: smallest pivot {smallest:.3e} "
            f"(relative {smallest / scale:.3e})",
            smallest,
        )
    inv = cho_solve((lower, True), np.eye(a.shape[0]))
    return SpdInverse((inv + inv.T) * 0.5, pivots)


def mahalanobis(x: ArrayLike, mean: ArrayLike, inv: SpdInverse) -> float:
    """Squared Mahalanobis distance ``(x - mean)^T inv (x - mean)``."""
    xv = np.asarray(x, dtype=np.float64)
    mv = np.asarray(mean, dtype=np.float64)
    if xv.shape != mv.shape or xv.shape != (inv.source_dim,):
        raise DimensionError(
            f"dimension mismatch: x {xv.shape}, mean {mv.shape}, inverse {inv.source_dim}"
        )
    diff = xv - mv
    return max(float(diff @ inv.inverse @ diff), 0.0)


def mahalanobis_many(x: NDArray, mean: NDArray, inv: SpdInverse) -> NDArray:
    """Row-wise squared distances for an ``(n, d)`` query block."""
    diff = np.asarray(x, dtype=np.float64) - mean
    if diff.ndim != 2 or diff.shape[1] != inv.source_dim:
        raise DimensionError(
            f"query block shape {np.shape(x)} does not match dim {inv.source_dim}"
        )
    q = np.einsum("ij,jk,ik->i", diff, inv.inverse, diff)
    return np.maximum(q, 0.0)


def cosine_sim(x1: ArrayLike, x2: ArrayLike) -> float:
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def minmax01(x: ArrayLike) -> NDArray[np.float64]:
    """Affinely map a vector onto [0, 1]; a constant vector maps to zeros."""
    v = np.asarray(x, dtype=np.float64)
    lo = v.min()
    span = v.max() - lo
    if span == 0:
        return np.zeros_like(v)
    out = (v - lo) / span
    # pin the extremes exactly; rounding can leave max at 1 - ulp
    out[v == v.max()] = 1.0
    out[v == lo] = 0.0
    return out
