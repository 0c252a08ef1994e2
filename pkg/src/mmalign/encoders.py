"""Toy modality encoders: crystal graph, DOS curve, charge-density grid.

Each encoder has three layers of API:

* ``init_*`` builds an :class:`EncoderParams` with seeded weights;
* ``*_forward`` maps a list of payloads and a mapping of weight tensors to a
  ``(B, d)`` :class:`~mmalign.autodiff.Tensor` (the differentiable path used by
  the trainer);
* ``encode_*`` embeds a single payload and returns a plain array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    DimMismatchError,
    EmptyCurveError,
    GridSizeMismatchError,
    ShapeMismatchError,
)

# -- payload types ---------------------------------------------------------------


@dataclass
class CrystalGraph:
    """Atoms as nodes; edges carry the periodic-image displacement src -> dst."""

    node_features: np.ndarray  # (n, F)
    src: np.ndarray  # (E,)
    dst: np.ndarray  # (E,)
    displacements: np.ndarray  # (E, 3)

    def __post_init__(self):
        self.node_features = np.atleast_2d(np.asarray(self.node_features, dtype=np.float64))
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 3)
        n = self.num_nodes
        if n < 1:
            raise ShapeMismatchError("graph needs at least one node")
        if not (self.src.shape == self.dst.shape and self.src.shape[0] == self.displacements.shape[0]):
            raise ShapeMismatchError("src, dst and displacements must have the same edge count")
        if self.src.size and (self.src.min() < 0 or self.dst.min() < 0 or max(self.src.max(), self.dst.max()) >= n):
            raise ShapeMismatchError(f"edge endpoint out of range for {n} nodes")
        if not (np.all(np.isfinite(self.node_features)) and np.all(np.isfinite(self.displacements))):
            raise ShapeMismatchError("graph contains non-finite values")

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]

    def edge_features(self) -> np.ndarray:
        """[distance, 1/distance] per edge."""
        r = np.linalg.norm(self.displacements, axis=1)
        return np.stack([r, 1.0 / np.maximum(r, 1e-6)], axis=1)

    def permuted(self, perm: np.ndarray) -> "CrystalGraph":
        """Copy with node ``perm[i]`` of the result equal to node ``i`` of self."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return CrystalGraph(self.node_features[inv], perm[self.src], perm[self.dst], self.displacements)


@dataclass
class DosCurve:
    energies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.energies.size == 0:
            raise EmptyCurveError("DOS curve has no points")
        if self.energies.shape != self.values.shape:
            raise ShapeMismatchError("energies and values differ in length")
        if np.any(np.diff(self.energies) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("DOS values must be finite and nonnegative")


@dataclass
class DensityGrid:
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or len(set(self.voxels.shape)) != 1:
            raise GridSizeMismatchError(f"expected a cubic G x G x G grid, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)) or np.any(self.voxels < 0):
            raise ValueError("voxels must be finite and nonnegative")

    @property
    def grid_size(self) -> int:
        return self.voxels.shape[0]


@dataclass
class EncoderParams:
    kind: str
    embed_dim: int
    config: dict
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.kind, self.embed_dim, dict(self.config), {k: v.copy() for k, v in self.weights.items()})

    @property
    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.weights.values())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _tensors(weights: Mapping) -> dict[str, ad.Tensor]:
    return {k: ad.as_tensor(v) for k, v in weights.items()}


def _layer_norm(x: ad.Tensor, gain: ad.Tensor, bias: ad.Tensor, eps: float = 1e-5) -> ad.Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * gain + bias


# -- crystal ----------------------------------------------------------------------


def init_crystal(embed_dim: int, node_dim: int, hidden: int = 32, rounds: int = 2, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    H = hidden
    w = {
        "in.W": _uniform(rng, (node_dim, H), node_dim),
        "in.b": np.zeros(H),
    }
    for r in range(rounds):
        w[f"mp{r}.msg.W"] = _uniform(rng, (H, H), H + 2)
        w[f"mp{r}.edge.W"] = _uniform(rng, (2, H), H + 2)
        w[f"mp{r}.msg.b"] = np.zeros(H)
        w[f"mp{r}.self.W"] = _uniform(rng, (H, H), 2 * H)
        w[f"mp{r}.agg.W"] = _uniform(rng, (H, H), 2 * H)
        w[f"mp{r}.upd.b"] = np.zeros(H)
    w["out.W"] = _uniform(rng, (H, embed_dim), H)
    w["out.b"] = np.zeros(embed_dim)
    cfg = {"node_dim": node_dim, "hidden": hidden, "rounds": rounds}
    return EncoderParams("crystal", embed_dim, cfg, w)


def crystal_forward(graphs: Sequence[CrystalGraph], weights: Mapping, params: EncoderParams) -> ad.Tensor:
    """Message passing with mean aggregation, then mean pooling over atoms."""
    cfg = params.config
    for g in graphs:
        if g.node_features.shape[1] != cfg["node_dim"]:
            raise ShapeMismatchError(f"node feature dim {g.node_features.shape[1]} != {cfg['node_dim']}")
    W = _tensors(weights)
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    n_total = int(offsets[-1])
    X = np.concatenate([g.node_features for g in graphs], axis=0)
    src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)])
    dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)])
    ef = np.concatenate([g.edge_features() for g in graphs], axis=0).reshape(-1, 2)
    graph_id = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])

    h = ad.silu(ad.matmul(X, W["in.W"]) + W["in.b"])
    for r in range(cfg["rounds"]):
        if src.size:
            msg = ad.silu(ad.matmul(ad.getitem(h, src), W[f"mp{r}.msg.W"]) + ad.matmul(ef, W[f"mp{r}.edge.W"]) + W[f"mp{r}.msg.b"])
            agg = ad.segment_mean(msg, dst, n_total)
        else:
            agg = ad.Tensor(np.zeros(h.shape))
        h = h + ad.silu(ad.matmul(h, W[f"mp{r}.self.W"]) + ad.matmul(agg, W[f"mp{r}.agg.W"]) + W[f"mp{r}.upd.b"])
    pooled = ad.segment_mean(h, graph_id, len(graphs))
    return ad.matmul(pooled, W["out.W"]) + W["out.b"]


def encode_crystal(g: CrystalGraph, p: EncoderParams) -> np.ndarray:
    return crystal_forward([g], p.weights, p).data[0]


# -- DOS ----------------------------------------------------------------------------


def init_dos(embed_dim: int, heads: int = 2, blocks: int = 2, seed: int = 0) -> EncoderParams:
    if embed_dim % 2:
        raise ShapeMismatchError(f"DOS encoder needs an even embedding dim, got {embed_dim}")
    h = embed_dim // 2
    if h % heads:
        raise ShapeMismatchError(f"token width {h} not divisible by {heads} heads")
    rng = np.random.default_rng(seed)
    w = {
        "value.w": _uniform(rng, (h,), 1),
        "value.b": np.zeros(h),
        "energy.w": _uniform(rng, (h,), 1),
        "energy.b": np.zeros(h),
        "mix.W": _uniform(rng, (2 * h, 2 * h), 2 * h),
        "mix.b": np.zeros(2 * h),
        "down.W": _uniform(rng, (2 * h, h), 2 * h),
        "down.b": np.zeros(h),
    }
    for k in range(blocks):
        w[f"blk{k}.ln1.g"] = np.ones(h)
        w[f"blk{k}.ln1.b"] = np.zeros(h)
        for name in ("q", "k", "v", "o"):
            w[f"blk{k}.attn.{name}"] = _uniform(rng, (h, h), h)
        w[f"blk{k}.ln2.g"] = np.ones(h)
        w[f"blk{k}.ln2.b"] = np.zeros(h)
        w[f"blk{k}.ff1.W"] = _uniform(rng, (h, 2 * h), h)
        w[f"blk{k}.ff1.b"] = np.zeros(2 * h)
        w[f"blk{k}.ff2.W"] = _uniform(rng, (2 * h, h), 2 * h)
        w[f"blk{k}.ff2.b"] = np.zeros(h)
    w["proj.W"] = _uniform(rng, (h, embed_dim), h)
    w["proj.b"] = np.zeros(embed_dim)
    return EncoderParams("dos", embed_dim, {"heads": heads, "blocks": blocks}, w)


def _pad_curves(curves: Sequence[DosCurve]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = max(c.energies.size for c in curves)
    E = np.zeros((len(curves), T))
    V = np.zeros((len(curves), T))
    mask = np.zeros((len(curves), T))
    for i, c in enumerate(curves):
        n = c.energies.size
        E[i, :n], V[i, :n], mask[i, :n] = c.energies, c.values, 1.0
    return E, V, mask


def dos_forward(curves: Sequence[DosCurve], weights: Mapping, params: EncoderParams) -> ad.Tensor:
    """Token = (energy, value); no positional encoding, so token order is irrelevant."""
    if not curves:
        raise EmptyCurveError("no curves to encode")
    W = _tensors(weights)
    heads, blocks = params.config["heads"], params.config["blocks"]
    h = params.embed_dim // 2
    hd = h // heads
    E, V, mask = _pad_curves(curves)
    B, T = E.shape

    v_emb = V[..., None] * W["value.w"] + W["value.b"]
    e_emb = E[..., None] * W["energy.w"] + W["energy.b"]
    x = ad.concat([v_emb, e_emb], axis=-1)
    x = ad.silu(ad.matmul(x, W["mix.W"]) + W["mix.b"])
    x = ad.matmul(x, W["down.W"]) + W["down.b"]

    key_bias = ((mask - 1.0) * 1e9)[:, None, None, :]
    for k in range(blocks):
        y = _layer_norm(x, W[f"blk{k}.ln1.g"], W[f"blk{k}.ln1.b"])
        split = lambda t: ad.transpose(ad.reshape(t, (B, T, heads, hd)), (0, 2, 1, 3))  # noqa: E731
        q = split(ad.matmul(y, W[f"blk{k}.attn.q"]))
        kk = split(ad.matmul(y, W[f"blk{k}.attn.k"]))
        vv = split(ad.matmul(y, W[f"blk{k}.attn.v"]))
        scores = ad.matmul(q, ad.swapaxes(kk, -1, -2)) / np.sqrt(hd) + key_bias
        att = ad.softmax(scores, axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(att, vv), (0, 2, 1, 3)), (B, T, h))
        x = x + ad.matmul(o, W[f"blk{k}.attn.o"])
        y = _layer_norm(x, W[f"blk{k}.ln2.g"], W[f"blk{k}.ln2.b"])
        x = x + ad.matmul(ad.silu(ad.matmul(y, W[f"blk{k}.ff1.W"]) + W[f"blk{k}.ff1.b"]), W[f"blk{k}.ff2.W"]) + W[f"blk{k}.ff2.b"]

    pooled = ad.tsum(x * mask[..., None], axis=1) / mask.sum(axis=1, keepdims=True)
    return ad.matmul(pooled, W["proj.W"]) + W["proj.b"]


def encode_dos(c: DosCurve, p: EncoderParams) -> np.ndarray:
    return dos_forward([c], p.weights, p).data[0]


# -- charge density --------------------------------------------------------------------


def init_density(embed_dim: int, grid_size: int = 16, channels: tuple[int, int] = (8, 16), seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    w = {
        "conv1.W": _uniform(rng, (c1, 1, 3, 3, 3), 27),
        "conv1.b": np.zeros(c1),
        "conv2.W": _uniform(rng, (c2, c1, 3, 3, 3), 27 * c1),
        "conv2.b": np.zeros(c2),
        "out.W": _uniform(rng, (c2, embed_dim), c2),
        "out.b": np.zeros(embed_dim),
    }
    return EncoderParams("density", embed_dim, {"grid_size": grid_size, "channels": [c1, c2]}, w)


def density_features(grids: Sequence[DensityGrid], weights: Mapping, params: EncoderParams) -> ad.Tensor:
    """Pooled convolutional features before the output projection, shape (B, c2)."""
    G = params.config["grid_size"]
    for g in grids:
        if g.grid_size != G:
            raise GridSizeMismatchError(f"grid size {g.grid_size} != configured {G}")
    W = _tensors(weights)
    x = np.stack([g.voxels for g in grids])[:, None]
    x = ad.silu(ad.conv3d(x, W["conv1.W"], stride=2, padding=1) + ad.reshape(W["conv1.b"], (1, -1, 1, 1, 1)))
    x = ad.silu(ad.conv3d(x, W["conv2.W"], stride=2, padding=1) + ad.reshape(W["conv2.b"], (1, -1, 1, 1, 1)))
    return ad.mean(x, axis=(2, 3, 4))


def density_forward(grids: Sequence[DensityGrid], weights: Mapping, params: EncoderParams) -> ad.Tensor:
    W = _tensors(weights)
    return ad.matmul(density_features(grids, W, params), W["out.W"]) + W["out.b"]


def encode_density(v: DensityGrid, p: EncoderParams) -> np.ndarray:
    return density_forward([v], p.weights, p).data[0]


# -- dispatch and probe head ------------------------------------------------------------

FORWARD = {"crystal": crystal_forward, "dos": dos_forward, "density": density_forward}


def forward(payloads: Sequence, weights: Mapping, params: EncoderParams) -> ad.Tensor:
    return FORWARD[params.kind](payloads, weights, params)


def embed_all(payloads: Sequence, params: EncoderParams, batch_size: int = 256) -> np.ndarray:
    """Embed many payloads without building gradients; returns (M, d)."""
    rows = [forward(payloads[i : i + batch_size], params.weights, params).data for i in range(0, len(payloads), batch_size)]
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, params.embed_dim))


def linear_head(e, w) -> float:
    """w[:d] . e + w[d]."""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != e.size + 1:
        raise DimMismatchError(f"head has {w.size} weights, expected {e.size + 1}")
    return float(np.dot(w[:-1], e) + w[-1])
