"""Screening-based inverse design over an exhaustive cosine index, plus
embedding export and a linear 2-D projection for inspection.

Index file layout (little-endian)::

    b"MMIX" | uint32 version | uint32 M | uint32 d
    uint32 len + UTF-8 source hash
    M x (uint32 len + UTF-8 id)
    M*d float32, row-major
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoders import DosCurve, EncoderParams, embed_all, encode_dos
from .errors import (
    BadNError,
    DuplicateIdError,
    FormatError,
    LookupMissingError,
    ModalityMissingError,
    SampleTooLargeError,
    TooFewRowsError,
)
from .evalkit import dos_mae
from .kernels import l2_normalize
from .synthdata import Dataset

INDEX_MAGIC = b"MMIX"
INDEX_VERSION = 1
PAPER_INTERPRETABILITY_SAMPLE = 16000


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray  # (M, d) float32, unit rows
    source_hash: str = ""

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            seen, dup = set(), None
            for i in self.ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise DuplicateIdError(f"id {dup!r} appears more than once")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids) or not self.ids:
            raise ValueError("index needs M >= 1 rows matching its ids")

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def params_hash(p: EncoderParams) -> str:
    h = hashlib.sha256(p.kind.encode())
    for k in sorted(p.weights):
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.weights[k], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def index_from_embeddings(ids: Sequence[str], emb: np.ndarray, source_hash: str = "") -> EmbeddingIndex:
    emb = np.asarray(emb, dtype=np.float64)
    unit = np.stack([l2_normalize(row) for row in emb]) if len(emb) else emb
    return EmbeddingIndex(list(ids), unit.astype(np.float32), source_hash)


def build_index(materials: Dataset, encoder: EncoderParams) -> EmbeddingIndex:
    """Crystal embeddings of every material, L2-normalized, stored as float32."""
    lacking = [r.id for r in materials if r.crystal is None]
    if lacking:
        raise ModalityMissingError(f"{len(lacking)} materials have no crystal (e.g. {lacking[0]})")
    ids = materials.ids
    if len(set(ids)) != len(ids):
        EmbeddingIndex(ids, np.zeros((len(ids), 1), np.float32))  # raises DuplicateIdError
    emb = embed_all(materials.payloads("crystal"), encoder)
    return index_from_embeddings(ids, emb, params_hash(encoder))


def similarities(idx: EmbeddingIndex, target) -> np.ndarray:
    t = l2_normalize(target)
    if t.shape[0] != idx.dim:
        raise ValueError(f"target dim {t.shape[0]} != index dim {idx.dim}")
    return idx.matrix.astype(np.float64) @ t


def query_nearest(idx: EmbeddingIndex, target, n: int) -> list[tuple[str, float]]:
    """Exact top-``n`` by cosine similarity, descending; ties to the lower row."""
    if not 1 <= n <= idx.size:
        raise BadNError(f"n={n} outside [1, {idx.size}]")
    sims = similarities(idx, target)
    order = np.argsort(-sims, kind="stable")[:n]
    return [(idx.ids[i], float(sims[i])) for i in order]


@dataclass
class ScreeningResult:
    target_id: str
    neighbors: list[tuple[str, float]]
    best_candidate: str
    best_mae: float
    maes: list[float]


def _lookup(dos_lookup, key: str) -> DosCurve:
    try:
        return dos_lookup(key) if callable(dos_lookup) else dos_lookup[key]
    except KeyError as exc:
        raise LookupMissingError(f"no DOS for candidate {key!r}") from exc


def best_of_n(
    idx: EmbeddingIndex,
    target: DosCurve,
    dos_lookup: "Mapping[str, DosCurve] | Callable[[str], DosCurve]",
    dos_encoder: EncoderParams,
    n: int,
    target_id: str = "",
) -> ScreeningResult:
    """Among the ``n`` crystals nearest the target DOS embedding, pick the one
    whose own DOS has the lowest normalized MAE against the target."""
    neighbors = query_nearest(idx, encode_dos(target, dos_encoder), n)
    maes = [dos_mae(target, _lookup(dos_lookup, cid)).value for cid, _ in neighbors]
    best = int(np.argmin(maes))
    return ScreeningResult(target_id, neighbors, neighbors[best][0], maes[best], maes)


def best_of_n_curve(
    idx: EmbeddingIndex,
    target: DosCurve,
    dos_lookup,
    dos_encoder: EncoderParams,
    ns: Sequence[int],
    target_id: str = "",
) -> list[ScreeningResult]:
    """``best_of_n`` for several n with one neighbor query; results follow ``ns``."""
    full = best_of_n(idx, target, dos_lookup, dos_encoder, max(ns), target_id)
    out = []
    for n in ns:
        if n < 1:
            raise BadNError(f"n={n} must be >= 1")
        maes = full.maes[:n]
        best = int(np.argmin(maes))
        out.append(ScreeningResult(target_id, full.neighbors[:n], full.neighbors[best][0], maes[best], maes))
    return out


# -- persistence ------------------------------------------------------------------------------


def save_index(idx: EmbeddingIndex, path: str | Path) -> None:
    M, d = idx.matrix.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<III", INDEX_VERSION, M, d))
        hb = idx.source_hash.encode("utf-8")
        fh.write(struct.pack("<I", len(hb)) + hb)
        for i in idx.ids:
            b = i.encode("utf-8")
            fh.write(struct.pack("<I", len(b)) + b)
        fh.write(np.ascontiguousarray(idx.matrix, dtype="<f4").tobytes())


def load_index(path: str | Path) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: not an index file")
    try:
        return _parse_index(raw, path)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt index ({exc})") from exc


def _parse_index(raw: bytes, path) -> EmbeddingIndex:
    version, M, d = struct.unpack_from("<III", raw, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    pos = 16
    (hl,) = struct.unpack_from("<I", raw, pos)
    source = raw[pos + 4 : pos + 4 + hl].decode("utf-8")
    pos += 4 + hl
    ids = []
    for _ in range(M):
        (n,) = struct.unpack_from("<I", raw, pos)
        ids.append(raw[pos + 4 : pos + 4 + n].decode("utf-8"))
        pos += 4 + n
    body = raw[pos:]
    if len(body) != 4 * M * d:
        raise FormatError(f"{path}: matrix payload is {len(body)} bytes, expected {4 * M * d}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(M, d).astype(np.float32)
    return EmbeddingIndex(ids, matrix, source)


# -- export and projection ------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    ids: list[str]
    property_names: list[str]
    properties: np.ndarray  # (M, P)
    embeddings: np.ndarray  # (M, d)

    def write_csv(self, path: str | Path) -> None:
        d = self.embeddings.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *self.property_names, *(f"e{i}" for i in range(d))])
            for i, mid in enumerate(self.ids):
                w.writerow([mid, *map(repr, self.properties[i].tolist()), *map(repr, self.embeddings[i].tolist())])

    @classmethod
    def read_csv(cls, path: str | Path) -> "EmbeddingTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        e_cols = [j for j, h in enumerate(header) if h.startswith("e") and h[1:].isdigit()]
        p_cols = [j for j in range(1, len(header)) if j not in e_cols]
        return cls(
            [r[0] for r in body],
            [header[j] for j in p_cols],
            np.array([[float(r[j]) for j in p_cols] for r in body]).reshape(len(body), len(p_cols)),
            np.array([[float(r[j]) for j in e_cols] for r in body]).reshape(len(body), len(e_cols)),
        )


def export_embeddings(
    ckpt,
    materials: Dataset,
    sample: int,
    seed: int = 0,
    path: str | Path | None = None,
    modality: str = "crystal",
) -> EmbeddingTable:
    """Seeded random sample of materials with property columns and embeddings."""
    if sample > len(materials):
        raise SampleTooLargeError(f"sample {sample} exceeds dataset size {len(materials)}")
    if sample < 1:
        raise SampleTooLargeError("sample must be >= 1")
    pick = np.sort(np.random.default_rng(seed).choice(len(materials), size=sample, replace=False))
    chosen = materials.subset(pick)
    enc = ckpt.encoders[modality] if hasattr(ckpt, "encoders") else ckpt
    names = sorted(set().union(*(r.properties for r in chosen)))
    props = np.array([[r.properties.get(k, np.nan) for k in names] for r in chosen]).reshape(len(chosen), len(names))
    table = EmbeddingTable(chosen.ids, names, props, embed_all(chosen.payloads(modality), enc))
    if path is not None:
        table.write_csv(path)
    return table


def project_2d(table: "EmbeddingTable | np.ndarray") -> np.ndarray:
    """Top-2 principal-component scores of the centered embeddings.

    Each direction's sign makes its largest-magnitude loading positive.
    """
    X = table.embeddings if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float64)
    if X.shape[0] < 3:
        raise TooFewRowsError(f"need at least 3 rows, got {X.shape[0]}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    if top.shape[1] < 2:
        top = np.pad(top, ((0, 0), (0, 2 - top.shape[1])))
    for j in range(top.shape[1]):
        k = np.argmax(np.abs(top[:, j]))
        if top[k, j] < 0:
            top[:, j] = -top[:, j]
    return Xc @ top


def write_projection_csv(ids: Sequence[str], coords: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for i, (x, y) in zip(ids, coords):
            w.writerow([i, repr(float(x)), repr(float(y))])
