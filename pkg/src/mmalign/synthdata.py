"""Synthetic coupled-modality materials, dataset intersection/splitting, and
on-disk formats.

Every generated material draws one hidden latent vector ``z``; its crystal
graph, DOS curve, density grid and scalar properties are all functions of ``z``
plus noise, so the modalities share information by construction.

Files
-----
``dataset.jsonl``
    One JSON object per line with fields ``id``, ``latent``, ``crystal``,
    ``dos`` (``energies``/``values``), ``density_ref`` and ``properties``.
    Absent modalities are ``null``.
``density/<id>.mmv``
    16-byte header (``b"MMV1"``, uint32 grid size G, 8 reserved zero bytes)
    followed by G**3 little-endian float32 voxels in row-major order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import CrystalGraph, DensityGrid, DosCurve
from .errors import BadSpecError, EmptyDatasetError, FormatError

MODALITIES = ("crystal", "dos", "density")
VOXEL_MAGIC = b"MMV1"
DATASET_FILE = "dataset.jsonl"

# Full-scale intersection sizes of the real corpus, kept for reference only.
PAPER_INTERSECTION_SIZES = {
    frozenset({"crystal", "density"}): 121915,
    frozenset({"crystal", "dos"}): 89071,
    frozenset({"crystal", "density", "dos"}): 78461,
}


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 8
    grid_size: int = 16
    tokens: int = 64
    node_dim: int = 8
    atom_types: int = 4
    min_atoms: int = 2
    max_atoms: int = 6
    neighbors: int = 4
    dos_peaks: int = 4
    density_blobs: int = 3
    node_noise: float = 0.05
    dos_noise: float = 0.02
    density_noise: float = 0.01
    modality_dropout: float = 0.0
    world_seed: int = 20240101

    def validate(self) -> "GeneratorSpec":
        ints = ("latent_dim", "grid_size", "tokens", "node_dim", "atom_types", "min_atoms", "neighbors", "dos_peaks", "density_blobs")
        for name in ints:
            if getattr(self, name) < 1:
                raise BadSpecError(f"{name} must be >= 1")
        if self.latent_dim < 6:
            raise BadSpecError("latent_dim must be >= 6 (properties read six latent coordinates)")
        if self.max_atoms < self.min_atoms:
            raise BadSpecError("max_atoms < min_atoms")
        if self.tokens < 2:
            raise BadSpecError("tokens must be >= 2")
        if not 0.0 <= self.modality_dropout < 1.0:
            raise BadSpecError("modality_dropout must be in [0, 1)")
        for name in ("node_noise", "dos_noise", "density_noise"):
            if getattr(self, name) < 0:
                raise BadSpecError(f"{name} must be >= 0")
        return self


def parse_generator_spec(text: str) -> GeneratorSpec:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(GeneratorSpec)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadSpecError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise BadSpecError(f"line {lineno}: unknown key {key!r}")
        try:
            kwargs[key] = float(value) if types[key] in (float, "float") else int(value)
        except ValueError as exc:
            raise BadSpecError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return GeneratorSpec(**kwargs).validate()


def format_generator_spec(spec: GeneratorSpec) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(spec).items())


@dataclass
class MaterialRecord:
    id: str
    latent: np.ndarray
    crystal: CrystalGraph | None = None
    dos: DosCurve | None = None
    density: DensityGrid | None = None
    properties: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.modalities:
            raise ValueError(f"record {self.id} has no modality")

    @property
    def modalities(self) -> frozenset[str]:
        return frozenset(m for m in MODALITIES if getattr(self, m) is not None)


@dataclass
class Dataset:
    records: list[MaterialRecord]
    modality_mask: frozenset[str] = frozenset()

    def __post_init__(self):
        self.modality_mask = frozenset(self.modality_mask)
        for r in self.records:
            if not self.modality_mask <= r.modalities:
                raise ValueError(f"record {r.id} lacks {sorted(self.modality_mask - r.modalities)}")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> MaterialRecord:
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, MaterialRecord]:
        return {r.id: r for r in self.records}

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.modality_mask)

    def payloads(self, modality: str) -> list:
        return [getattr(r, modality) for r in self.records]


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")


# -- generator ----------------------------------------------------------------------


class _World:
    """Fixed random maps from latent to observables, shared by all materials."""

    _cache: dict = {}

    def __init__(self, spec: GeneratorSpec):
        rng = np.random.default_rng(spec.world_seed)
        m = spec.latent_dim
        s = 1.0 / math.sqrt(m)
        self.type_logits = rng.normal(0, 1.5 * s, (spec.atom_types, m))
        self.type_embed = rng.normal(0, 1.0, (spec.atom_types, spec.node_dim))
        self.node_map = rng.normal(0, s, (m, spec.node_dim))
        self.peak_shift = rng.normal(0, s, (spec.dos_peaks, m))
        self.peak_weight = rng.normal(0, s, (spec.dos_peaks, m))
        self.peak_width = rng.normal(0, s, (spec.dos_peaks, m))
        self.peak_base = np.linspace(-7.0, 7.0, spec.dos_peaks)
        self.blob_center = rng.normal(0, 1.5 * s, (spec.density_blobs, 3, m))
        self.blob_amp = rng.normal(0, s, (spec.density_blobs, m))
        self.blob_width = rng.normal(0, s, (spec.density_blobs, m))

    @classmethod
    def get(cls, spec: GeneratorSpec) -> "_World":
        if spec not in cls._cache:
            cls._cache[spec] = cls(spec)
        return cls._cache[spec]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def latent_properties(z: np.ndarray) -> dict[str, float]:
    """Smooth scalar labels of the latent vector."""
    return {
        "gap": float(_softplus(1.5 * z[0] + 0.5 * math.sin(2.0 * z[1]) + 0.3 * z[2] * z[3])),
        "formation_energy": float(-1.0 + 0.4 * z[1] - 0.3 * math.tanh(z[0] * z[2]) + 0.2 * z[4]),
        "fermi_energy": float(0.5 * math.tanh(z[3]) + 0.2 * z[5]),
    }


def _make_crystal(z, rng, spec: GeneratorSpec, world: _World) -> CrystalGraph:
    n = int(rng.integers(spec.min_atoms, spec.max_atoms + 1))
    logits = world.type_logits @ z
    probs = np.exp(logits - logits.max())
    types = rng.choice(spec.atom_types, size=n, p=probs / probs.sum())
    feats = np.tanh(world.type_embed[types] + z @ world.node_map) + spec.node_noise * rng.normal(size=(n, spec.node_dim))
    lattice = 3.0 * math.exp(0.15 * z[1])
    frac = rng.uniform(size=(n, 3))
    images = np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij")).reshape(3, -1).T
    src, dst, disp = [], [], []
    for i in range(n):
        cand = (frac[None, :, :] + images[:, None, :] - frac[i]).reshape(-1, 3) * lattice
        j_of = np.tile(np.arange(n), len(images))
        dist = np.linalg.norm(cand, axis=1)
        dist[dist < 1e-9] = np.inf  # the atom itself
        order = np.argsort(dist, kind="stable")[: spec.neighbors]
        for o in order:
            # message flows neighbour -> atom i
            src.append(int(j_of[o]))
            dst.append(i)
            disp.append(-cand[o])
    return CrystalGraph(feats, np.array(src), np.array(dst), np.array(disp))


def _make_dos(z, props, rng, spec: GeneratorSpec, world: _World) -> DosCurve:
    lo = -10.0 + 3.0 * rng.uniform()
    hi = 10.0 - 3.0 * rng.uniform()
    E = np.linspace(lo, hi, spec.tokens)
    centers = world.peak_base + 1.5 * np.tanh(world.peak_shift @ z)
    weights = _softplus(world.peak_weight @ z) + 0.2
    widths = 0.6 + 0.6 * _sigmoid(world.peak_width @ z)
    vals = np.sum(
        weights[:, None] * np.exp(-0.5 * ((E[None, :] - centers[:, None]) / widths[:, None]) ** 2) / widths[:, None],
        axis=0,
    )
    # suppress states inside the gap around the Fermi level
    vals *= _sigmoid(4.0 * (np.abs(E - props["fermi_energy"]) - 0.5 * props["gap"]))
    vals += 0.1
    vals += np.abs(spec.dos_noise * rng.normal(size=E.shape))
    return DosCurve(E, vals)


def _make_density(z, rng, spec: GeneratorSpec, world: _World) -> DensityGrid:
    G = spec.grid_size
    axis = np.arange(G, dtype=np.float64)
    X, Y, Zg = np.meshgrid(axis, axis, axis, indexing="ij")
    vox = np.zeros((G, G, G))
    for b in range(spec.density_blobs):
        c = _sigmoid(world.blob_center[b] @ z) * (G - 1)
        amp = _softplus(world.blob_amp[b] @ z)
        w = G * (0.08 + 0.08 * _sigmoid(world.blob_width[b] @ z))
        r2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Zg - c[2]) ** 2
        vox += amp * np.exp(-0.5 * r2 / w**2)
    vox += spec.density_noise * rng.uniform(size=vox.shape)
    # store at the file precision so reloads are exact
    return DensityGrid(vox.astype(np.float32).astype(np.float64))


def generate_material(seed: int, spec: GeneratorSpec = GeneratorSpec()) -> MaterialRecord:
    """Deterministic synthetic material for ``seed``."""
    spec.validate()
    world = _World.get(spec)
    rng = np.random.default_rng(seed)
    z = rng.normal(size=spec.latent_dim)
    props = latent_properties(z)
    present = {m: True for m in MODALITIES}
    if spec.modality_dropout > 0:
        drop = rng.uniform(size=len(MODALITIES)) < spec.modality_dropout
        present = {m: not d for m, d in zip(MODALITIES, drop)}
        if not any(present.values()):
            present["crystal"] = True
    # each modality gets its own stream so dropout does not shift the others
    sub = [np.random.default_rng([seed, k]) for k in range(3)]
    return MaterialRecord(
        id=f"syn-{seed}",
        latent=z,
        crystal=_make_crystal(z, sub[0], spec, world) if present["crystal"] else None,
        dos=_make_dos(z, props, sub[1], spec, world) if present["dos"] else None,
        density=_make_density(z, sub[2], spec, world) if present["density"] else None,
        properties=props,
    )


def generate_dataset(n: int, seed: int = 0, spec: GeneratorSpec = GeneratorSpec()) -> Dataset:
    """``n`` materials with per-material seeds ``seed * 10**6 + i``."""
    if n < 0:
        raise BadSpecError("n must be nonnegative")
    records = [generate_material(seed * 10**6 + i, spec) for i in range(n)]
    return intersect_datasets(records, ())


# -- intersection / split ------------------------------------------------------------


def intersect_datasets(records: Iterable[MaterialRecord], required: Iterable[str]) -> Dataset:
    """Records that carry every required modality, in input order."""
    required = frozenset(required)
    unknown = required - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    if isinstance(records, Dataset):
        records = records.records
    kept = [r for r in records if required <= r.modalities]
    return Dataset(kept, required)


def split_sizes(n: int, s: SplitSpec) -> tuple[int, int, int]:
    n_val = math.floor(n * s.val_frac + 1e-9)
    n_test = math.floor(n * s.test_frac + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(d: Dataset, s: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then floor-sized val/test with the remainder in train."""
    if len(d) == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    n_train, n_val, _ = split_sizes(len(d), s)
    perm = np.random.default_rng(s.seed).permutation(len(d))
    return (
        d.subset(perm[:n_train]),
        d.subset(perm[n_train : n_train + n_val]),
        d.subset(perm[n_train + n_val :]),
    )


# -- file formats --------------------------------------------------------------------


def write_voxels(path: str | Path, grid: DensityGrid) -> None:
    G = grid.grid_size
    with open(path, "wb") as fh:
        fh.write(VOXEL_MAGIC + struct.pack("<I", G) + bytes(8))
        fh.write(np.ascontiguousarray(grid.voxels, dtype="<f4").tobytes())


def read_voxels(path: str | Path) -> DensityGrid:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != VOXEL_MAGIC:
        raise FormatError(f"{path}: not a voxel file")
    (G,) = struct.unpack("<I", raw[4:8])
    body = raw[16:]
    if len(body) != 4 * G**3:
        raise FormatError(f"{path}: expected {4 * G**3} payload bytes, found {len(body)}")
    return DensityGrid(np.frombuffer(body, dtype="<f4").reshape(G, G, G).astype(np.float64))


def _record_to_json(r: MaterialRecord, density_ref: str | None) -> dict:
    crystal = None
    if r.crystal is not None:
        crystal = {
            "node_features": r.crystal.node_features.tolist(),
            "src": r.crystal.src.tolist(),
            "dst": r.crystal.dst.tolist(),
            "displacements": r.crystal.displacements.tolist(),
        }
    dos = None if r.dos is None else {"energies": r.dos.energies.tolist(), "values": r.dos.values.tolist()}
    return {
        "id": r.id,
        "latent": np.asarray(r.latent).tolist(),
        "crystal": crystal,
        "dos": dos,
        "density_ref": density_ref,
        "properties": dict(r.properties),
    }


def write_dataset(records: Iterable[MaterialRecord], out_dir: str | Path) -> Path:
    """Write ``dataset.jsonl`` plus density sidecars under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "density").mkdir(parents=True, exist_ok=True)
    path = out_dir / DATASET_FILE
    seen: set[str] = set()
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            if r.id in seen:
                raise ValueError(f"duplicate id {r.id}")
            seen.add(r.id)
            ref = None
            if r.density is not None:
                ref = f"density/{r.id}.mmv"
                write_voxels(out_dir / ref, r.density)
            fh.write(json.dumps(_record_to_json(r, ref)) + "\n")
    return path


def read_dataset(path: str | Path) -> Dataset:
    """Load a dataset file (or a directory containing ``dataset.jsonl``)."""
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_FILE
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                c = obj.get("crystal")
                crystal = None
                if c is not None:
                    crystal = CrystalGraph(c["node_features"], c["src"], c["dst"], c["displacements"])
                d = obj.get("dos")
                dos = None if d is None else DosCurve(d["energies"], d["values"])
                ref = obj.get("density_ref")
                density = None if ref is None else read_voxels(base / ref)
                records.append(
                    MaterialRecord(
                        id=obj["id"],
                        latent=np.asarray(obj.get("latent", []), dtype=np.float64),
                        crystal=crystal,
                        dos=dos,
                        density=density,
                        properties={k: float(v) for k, v in obj.get("properties", {}).items()},
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    common = frozenset.intersection(*(r.modalities for r in records)) if records else frozenset()
    return Dataset(records, common)


def load_dos_json(path: str | Path) -> DosCurve:
    """A standalone DOS curve file: ``{"energies": [...], "values": [...]}``."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if "dos" in obj and isinstance(obj["dos"], dict):
        obj = obj["dos"]
    return DosCurve(obj["energies"], obj["values"])


def materials_by_modality(records: Sequence[MaterialRecord]) -> dict[frozenset[str], int]:
    out: dict[frozenset[str], int] = {}
    for r in records:
        out[r.modalities] = out.get(r.modalities, 0) + 1
    return out
