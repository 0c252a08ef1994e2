"""Cross-modal retrieval accuracy and the windowed, normalized DOS MAE."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoders import DosCurve
from .errors import BadKError, BatchMismatchError, WindowNotCoveredError, ZeroNormError
from .kernels import EPS

DOS_WINDOW = (-5.0, 5.0)
DOS_GRID_POINTS = 501


def _unit_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms <= EPS):
        raise ZeroNormError("embedding row with zero norm")
    return X / norms


def retrieval_ranks(queries, gallery) -> np.ndarray:
    """0-based rank of each query's paired gallery row by cosine similarity.

    Ties go to the lower gallery index.
    """
    Q, G = _unit_rows(queries), _unit_rows(gallery)
    if Q.shape != G.shape:
        raise BatchMismatchError(f"queries {Q.shape} and gallery {G.shape} must be paired")
    S = Q @ G.T
    true = np.diag(S)[:, None]
    idx = np.arange(S.shape[0])
    ahead = (S > true) | ((S == true) & (idx[None, :] < idx[:, None]))
    return ahead.sum(axis=1)


def topk_retrieval(queries, gallery, k: int) -> float:
    """Fraction of queries whose paired gallery row is in the top ``k``."""
    n = np.asarray(queries).shape[0]
    if not 1 <= k <= n:
        raise BadKError(f"k={k} outside [1, {n}]")
    return float(np.mean(retrieval_ranks(queries, gallery) < k))


@dataclass
class RetrievalReport:
    k_values: list[int]
    gallery_size: int
    accuracies: dict[tuple[str, str, int], float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, float]]:
        return [(f"{q}->{g}", k, acc) for (q, g, k), acc in self.accuracies.items()]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "k", "accuracy"])
            for pair, k, acc in self.rows():
                w.writerow([pair, k, repr(acc)])

    def write_columns(self, path: str | Path) -> None:
        """Whitespace-separated table: one row per k, one column per pair."""
        pairs = sorted({(q, g) for q, g, _ in self.accuracies})
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("k " + " ".join(f"{q}->{g}" for q, g in pairs) + "\n")
            for k in self.k_values:
                fh.write(f"{k} " + " ".join(f"{self.accuracies[(q, g, k)]:.6f}" for q, g in pairs) + "\n")


def retrieval_report(embeddings: Mapping[str, np.ndarray], k_values: Sequence[int]) -> RetrievalReport:
    """Top-k accuracy for every ordered pair of modalities."""
    names = list(embeddings)
    n = np.asarray(embeddings[names[0]]).shape[0]
    ks = [k for k in k_values if k <= n]
    report = RetrievalReport(list(ks), n)
    for q, g in itertools.permutations(names, 2):
        ranks = retrieval_ranks(embeddings[q], embeddings[g])
        for k in ks:
            report.accuracies[(q, g, k)] = float(np.mean(ranks < k))
    return report


@dataclass(frozen=True)
class DosMaeResult:
    value: float
    grid_points: int
    window: tuple[float, float] = DOS_WINDOW

    def __float__(self) -> float:
        return self.value


def _covers(c: DosCurve, window: tuple[float, float]) -> bool:
    return c.energies[0] <= window[0] and c.energies[-1] >= window[1]


def dos_mae(
    target: DosCurve,
    candidate: DosCurve,
    window: tuple[float, float] = DOS_WINDOW,
    points: int = DOS_GRID_POINTS,
) -> DosMaeResult:
    """MAE on a shared equispaced grid, divided by the target's mean height.

    Both curves are linearly interpolated onto ``points`` energies spanning
    ``window`` (endpoints included).  Numerator and denominator are both
    trapezoidal means over the window (area / width), so the result is
    dimensionless and its grid error is second order in the spacing.  A plain
    average of the samples would differ by O(1/points) through the endpoints.
    """
    for name, c in (("target", target), ("candidate", candidate)):
        if not _covers(c, window):
            raise WindowNotCoveredError(
                f"{name} spans [{c.energies[0]:.3g}, {c.energies[-1]:.3g}] eV, window is {window}"
            )
    grid = np.linspace(window[0], window[1], points)
    t = np.interp(grid, target.energies, target.values)
    c = np.interp(grid, candidate.energies, candidate.values)
    width = window[1] - window[0]
    height = np.trapezoid(t, grid) / width
    if height <= 0:
        raise ValueError("target DOS has zero area on the window")
    mae = np.trapezoid(np.abs(t - c), grid) / width
    return DosMaeResult(float(mae / height), points, tuple(window))
