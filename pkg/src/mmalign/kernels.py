"""Vector kernels: normalization, cosine and three-way similarity, centering.

These accept plain arrays or :class:`~mmalign.autodiff.Tensor` objects.  The
array versions return arrays; the ``*_t`` variants used inside losses stay on
the differentiable path.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import BatchTooSmallError, DimMismatchError, ZeroNormError

EPS = 1e-12


def _vec(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimMismatchError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def _norm(v: np.ndarray) -> float:
    n = float(np.sqrt(np.dot(v, v)))
    if n <= EPS:
        raise ZeroNormError(f"vector norm {n:.3g} is below {EPS}")
    return n


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm."""
    arr = _vec(v)
    return arr / _norm(arr)


def cosine_sim(a, b) -> float:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise DimMismatchError(f"{a.shape} vs {b.shape}")
    val = float(np.dot(a, b)) / (_norm(a) * _norm(b))
    return min(1.0, max(-1.0, val))


def threeway_sim(a, b, c) -> float:
    """Sum of the coordinate-wise triple product over the three norms."""
    a, b, c = _vec(a), _vec(b), _vec(c)
    if not (a.shape == b.shape == c.shape):
        raise DimMismatchError(f"{a.shape}, {b.shape}, {c.shape}")
    # order-independent: coordinate products then pairwise sum
    prod = np.sort(np.stack([a, b, c]), axis=0)
    num = float(np.sum(prod[0] * prod[1] * prod[2]))
    den = float(np.prod(np.sort([_norm(a), _norm(b), _norm(c)])))
    return min(1.0, max(-1.0, num / den))


def mean_center(Z) -> np.ndarray:
    """Subtract the per-feature batch mean."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise DimMismatchError(f"expected an (N, d) batch, got shape {Z.shape}")
    if Z.shape[0] < 2:
        raise BatchTooSmallError(f"mean centering needs N >= 2, got {Z.shape[0]}")
    return Z - Z.mean(axis=0, keepdims=True)


# -- batch helpers on the differentiable path ----------------------------------
def check_batch(Z, name: str = "batch") -> np.ndarray:
    data = Z.data if isinstance(Z, ad.Tensor) else np.asarray(Z, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise DimMismatchError(f"{name} must be (N, d) with N, d >= 1; got shape {data.shape}")
    return data


def check_rows_nonzero(data: np.ndarray, name: str = "batch") -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", data, data))
    bad = np.flatnonzero(norms <= EPS)
    if bad.size:
        raise ZeroNormError(f"{name} rows {bad.tolist()} have zero norm")


def normalize_rows_t(Z) -> ad.Tensor:
    Z = ad.as_tensor(Z)
    check_rows_nonzero(Z.data)
    return Z / ad.sqrt(ad.tsum(ad.square(Z), axis=1, keepdims=True))


def mean_center_t(Z) -> ad.Tensor:
    Z = ad.as_tensor(Z)
    if Z.shape[0] < 2:
        raise BatchTooSmallError(f"mean centering needs N >= 2, got {Z.shape[0]}")
    return Z - ad.mean(Z, axis=0, keepdims=True)
