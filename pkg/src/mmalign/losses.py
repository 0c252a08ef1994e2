"""Multimodal alignment objectives.

All five objectives take ``(N, d)`` embedding batches, either arrays or
:class:`~mmalign.autodiff.Tensor` objects, and return a scalar ``Tensor`` so
the same call serves evaluation and training.  Losses are sums over the batch.

``tau`` may be a float or a scalar ``Tensor`` (learnable temperature).
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    BatchMismatchError,
    DegenerateColumnError,
    DimMismatchError,
    NoOtherModalitiesError,
    TooFewModalitiesError,
)
from .kernels import EPS, check_batch, mean_center_t, normalize_rows_t

DEFAULT_TAU = 0.07
DEFAULT_LAMBDA = 0.005
TAU_MIN, TAU_MAX = 0.01, 1.0
PARTIAL_TARGET = 0.5


@dataclass(frozen=True)
class ClipParams:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class BarlowParams:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


def _tau(p) -> "float | ad.Tensor":
    if isinstance(p, ClipParams):
        return p.tau
    if isinstance(p, ad.Tensor):
        return p
    tau = float(p)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return tau


def _lam(p) -> float:
    lam = p.lam if isinstance(p, BarlowParams) else float(p)
    if not lam >= 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return lam


def _check_same(batches: Sequence) -> list[np.ndarray]:
    datas = [check_batch(b, f"batch {i}") for i, b in enumerate(batches)]
    n0, d0 = datas[0].shape
    for i, x in enumerate(datas[1:], start=1):
        if x.shape[1] != d0:
            raise DimMismatchError(f"batch {i} has d={x.shape[1]}, expected {d0}")
        if x.shape[0] != n0:
            raise BatchMismatchError(f"batch {i} has N={x.shape[0]}, expected {n0}")
    return datas


def _infonce(S: ad.Tensor) -> ad.Tensor:
    """-sum_i log softmax_j(S)[i, i] with the softmax over the last axis."""
    return ad.tsum(ad.logsumexp(S, axis=-1)) - ad.tsum(ad.diagonal(S))


# -- pairwise family -----------------------------------------------------------
def clip_loss(A, B, p=ClipParams()) -> ad.Tensor:
    """Symmetrized infoNCE over cosine similarities of paired rows."""
    _check_same([A, B])
    tau = _tau(p)
    an, bn = normalize_rows_t(A), normalize_rows_t(B)
    S = ad.einsum("il,jl->ij", an, bn) / tau
    return 0.5 * (_infonce(S) + _infonce(ad.transpose(S)))


def allpairs_pairs(n: int) -> list[tuple[int, int]]:
    """Unordered modality pairs aligned by the all-pairs objective."""
    return list(itertools.combinations(range(n), 2))


def anchored_pairs(n: int, anchor: int = 0) -> list[tuple[int, int]]:
    return [(anchor, j) for j in range(n) if j != anchor]


def allpairs_clip_loss(batches: Sequence, p=ClipParams()) -> ad.Tensor:
    if len(batches) < 2:
        raise TooFewModalitiesError(f"need at least 2 modalities, got {len(batches)}")
    _check_same(batches)
    terms = [clip_loss(batches[i], batches[j], p) for i, j in allpairs_pairs(len(batches))]
    return _sum_terms(terms)


def anchored_clip_loss(anchor, others: Sequence, p=ClipParams()) -> ad.Tensor:
    if len(others) < 1:
        raise NoOtherModalitiesError("anchored objective needs at least one non-anchor modality")
    _check_same([anchor, *others])
    return _sum_terms([clip_loss(anchor, o, p) for o in others])


def _sum_terms(terms: list[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# -- direct alignment ----------------------------------------------------------
def _letters(n: int) -> str:
    # 'z' is reserved for the contracted feature axis
    return string.ascii_lowercase[:n]


def tensor_clip_loss_nd(batches: Sequence, p=ClipParams()) -> ad.Tensor:
    """Generalized TensorCLIP for n >= 2 modalities.

    The similarity tensor has N**n entries; each modality's term contrasts its
    matched entry against all N**(n-1) combinations of the other modalities.
    """
    n = len(batches)
    if n < 2:
        raise TooFewModalitiesError(f"need at least 2 modalities, got {n}")
    datas = _check_same(batches)
    N = datas[0].shape[0]
    tau = _tau(p)
    normed = [normalize_rows_t(b) for b in batches]
    idx = _letters(n)
    S = ad.einsum(",".join(c + "z" for c in idx) + "->" + idx, *normed) / tau
    diag = np.arange(N)
    matched = ad.getitem(S, (diag,) * n)
    total = None
    for m in range(n):
        axes = [m] + [a for a in range(n) if a != m]
        flat = ad.reshape(ad.transpose(S, axes), (N, N ** (n - 1)))
        term = ad.tsum(ad.logsumexp(flat, axis=-1)) - ad.tsum(matched)
        total = term if total is None else total + term
    return total / float(n)


def tensor_clip_loss(A, B, C, p=ClipParams()) -> ad.Tensor:
    """Three-modality TensorCLIP over the three-way similarity tensor."""
    return tensor_clip_loss_nd([A, B, C], p)


def _centered_normalized(batches: Sequence) -> list[ad.Tensor]:
    out = []
    for i, b in enumerate(batches):
        zc = mean_center_t(b)
        norms = np.sqrt(np.sum(zc.data**2, axis=0))
        bad = np.flatnonzero(norms <= EPS)
        if bad.size:
            raise DegenerateColumnError(f"batch {i} feature columns {bad.tolist()} have zero variance")
        out.append(zc / ad.sqrt(ad.tsum(ad.square(zc), axis=0, keepdims=True)))
    return out


def cross_correlation_tensor_nd(batches: Sequence) -> ad.Tensor:
    """n-index generalized cross-correlation of centered, column-normalized batches."""
    n = len(batches)
    if n < 2:
        raise TooFewModalitiesError(f"need at least 2 modalities, got {n}")
    _check_same(batches)
    normed = _centered_normalized(batches)
    idx = _letters(n)
    return ad.einsum(",".join("z" + c for c in idx) + "->" + idx, *normed)


def cross_correlation_tensor(Z1, Z2, Z3) -> np.ndarray:
    """d x d x d cross-correlation tensor (values only)."""
    return cross_correlation_tensor_nd([Z1, Z2, Z3]).data


def index_classes(d: int, n: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks over the n-index cube: all equal, partially equal, all distinct."""
    grids = np.meshgrid(*([np.arange(d)] * n), indexing="ij")
    all_equal = np.ones((d,) * n, dtype=bool)
    all_distinct = np.ones((d,) * n, dtype=bool)
    for a, b in itertools.combinations(range(n), 2):
        same = grids[a] == grids[b]
        all_equal &= same
        all_distinct &= ~same
    partial = ~(all_equal | all_distinct)
    return all_equal, partial, all_distinct


def barlow_loss_nd(batches: Sequence, p=BarlowParams()) -> ad.Tensor:
    """Hyper-diagonal target 1, partial matches target 1/2, distinct indices weighted by lambda."""
    lam = _lam(p)
    C = cross_correlation_tensor_nd(batches)
    eq, partial, distinct = index_classes(C.shape[0], len(batches))
    on = ad.tsum(ad.square(1.0 - C) * eq.astype(np.float64))
    mid = ad.tsum(ad.square(PARTIAL_TARGET - C) * partial.astype(np.float64))
    off = ad.tsum(ad.square(C) * distinct.astype(np.float64))
    return on + mid + lam * off


def barlow3d_loss(Z1, Z2, Z3, p=BarlowParams()) -> ad.Tensor:
    return barlow_loss_nd([Z1, Z2, Z3], p)
