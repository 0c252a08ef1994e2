"""Pre-training and fine-tuning loops.

AdamW with decoupled weight decay, linear warm-up into cosine decay, global
gradient-norm clipping, and argmin-validation checkpoint selection for
fine-tuning.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .encoders import EncoderParams, forward, init_crystal, init_density, init_dos
from .errors import (
    FormatError,
    ModalityMissingError,
    NonFiniteLossError,
    PropertyMissingError,
    ShapeMismatchError,
    StepOutOfRangeError,
)
from .evalkit import topk_retrieval
from .synthdata import Dataset, SplitSpec, split_dataset

log = logging.getLogger(__name__)

LOSS_MODALITIES: dict[str, tuple[str, ...]] = {
    "clip_dos": ("crystal", "dos"),
    "clip_density": ("crystal", "density"),
    "allpairs": ("crystal", "dos", "density"),
    "anchored": ("crystal", "dos", "density"),
    "tensorclip": ("crystal", "dos", "density"),
    "barlow3d": ("crystal", "dos", "density"),
}
CLIP_FAMILY = {"clip_dos", "clip_density", "allpairs", "anchored", "tensorclip"}
FINETUNE_SWEEP = (1e-3, 1e-4, 1e-5)


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "anchored"
    batch_size: int = 32
    epochs: int = 100
    peak_lr: float = 1e-4
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    seed: int = 0
    d: int = 128
    tau: float = losses.DEFAULT_TAU
    lam: float = losses.DEFAULT_LAMBDA
    learn_tau: bool = True
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crystal_hidden: int = 32
    dos_heads: int = 2
    dos_blocks: int = 2
    density_channels: tuple[int, int] = (8, 16)
    split_seed: int = 0
    split_fracs: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> "TrainConfig":
        if self.loss_kind not in LOSS_MODALITIES:
            raise ValueError(f"unknown loss {self.loss_kind!r}; choose from {sorted(LOSS_MODALITIES)}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for {self.loss_kind}, got {self.batch_size}")
        # epochs == 0 is allowed: the run returns the initialization unchanged
        if self.epochs < 0 or self.warmup_epochs < 0 or (self.epochs > 0 and self.epochs <= self.warmup_epochs):
            raise ValueError(f"need epochs > warmup_epochs >= 0, got {self.epochs}, {self.warmup_epochs}")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.d < 2 or self.d % 2:
            raise ValueError(f"embedding dim must be even and >= 2, got {self.d}")
        if not losses.TAU_MIN <= self.tau <= losses.TAU_MAX:
            raise ValueError(f"tau must lie in [{losses.TAU_MIN}, {losses.TAU_MAX}]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        SplitSpec(*self.split_fracs, seed=self.split_seed)
        return self

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(*self.split_fracs, seed=self.split_seed)

    @property
    def modalities(self) -> tuple[str, ...]:
        return LOSS_MODALITIES[self.loss_kind]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items() if k in names}
        return cls(**kw)


PRESETS: dict[str, dict] = {
    "paper-pretrain": dict(batch_size=360, epochs=500, peak_lr=1e-4, weight_decay=5e-4, warmup_epochs=10, d=128),
    "paper-retrieval": dict(batch_size=100, epochs=500, peak_lr=1e-4, weight_decay=5e-4, warmup_epochs=10, d=128),
    "desk": dict(batch_size=32, epochs=100, peak_lr=2e-3, weight_decay=5e-4, warmup_epochs=10, d=32),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides}).validate()


# -- schedule and optimizer ------------------------------------------------------------


def lr_at(step: int, total_steps: int, cfg) -> float:
    """Linear warm-up to ``cfg.peak_lr`` then cosine decay to 0 at ``total_steps``.

    The warm-up covers the first ``warmup_epochs / epochs`` of the steps.
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise StepOutOfRangeError(f"step {step} outside [0, {total_steps}]")
    warm = round(total_steps * cfg.warmup_epochs / cfg.epochs) if cfg.epochs else 0
    if step < warm:
        return cfg.peak_lr * step / warm
    if total_steps == warm:
        return cfg.peak_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    no_decay: Sequence[str] = (),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update; decay is applied to the weights, not the gradients."""
    b1, b2 = betas
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        update = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        decay = 0.0 if name in no_decay else weight_decay
        new_params[name] = p - lr * update - lr * decay * p
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# -- checkpoints -------------------------------------------------------------------------

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    encoders: dict[str, EncoderParams]
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    opt_state: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def flat_params(self) -> dict[str, np.ndarray]:
        out = {f"{m}/{k}": v for m, p in self.encoders.items() for k, v in p.weights.items()}
        out.update({f"extra/{k}": v for k, v in self.extra.items()})
        return out

    def load_flat(self, flat: Mapping[str, np.ndarray]) -> None:
        for name, value in flat.items():
            head, key = name.split("/", 1)
            if head == "extra":
                self.extra[key] = value
            else:
                self.encoders[head].weights[key] = value

    @property
    def tau(self) -> float:
        if "log_tau" in self.extra:
            return float(np.clip(np.exp(self.extra["log_tau"]), losses.TAU_MIN, losses.TAU_MAX))
        return float(self.config.get("tau", losses.DEFAULT_TAU))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Binary container: header, JSON metadata block, then named tensors."""
    tensors = {f"param/{k}": v for k, v in ckpt.flat_params().items()}
    for k, v in ckpt.opt_state.m.items():
        tensors[f"opt_m/{k}"] = v
    for k, v in ckpt.opt_state.v.items():
        tensors[f"opt_v/{k}"] = v
    meta = {
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "history": ckpt.history,
        "opt_step": ckpt.opt_state.step,
        "encoders": {m: {"kind": p.kind, "embed_dim": p.embed_dim, "config": p.config} for m, p in ckpt.encoders.items()},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta_bytes)) + meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in sorted(tensors.items()):
            arr = np.ascontiguousarray(arr)
            nb, dt = name.encode("utf-8"), arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(raw, path)
    except (struct.error, UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes, path) -> Checkpoint:
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2 : pos + 2 + nl].decode("utf-8")
        pos += 2 + nl
        (dl,) = struct.unpack_from("<B", raw, pos)
        dtype = np.dtype(raw[pos + 1 : pos + 1 + dl].decode("ascii"))
        pos += 1 + dl
        (ndim,) = struct.unpack_from("<B", raw, pos)
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 1)
        pos += 1 + 8 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    encoders = {
        m: EncoderParams(e["kind"], e["embed_dim"], e["config"], {}) for m, e in meta["encoders"].items()
    }
    ckpt = Checkpoint(encoders, epoch=meta["epoch"], config=meta["config"], history=meta["history"])
    ckpt.load_flat({k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")})
    ckpt.opt_state = AdamState(
        meta["opt_step"],
        {k[len("opt_m/") :]: v for k, v in tensors.items() if k.startswith("opt_m/")},
        {k[len("opt_v/") :]: v for k, v in tensors.items() if k.startswith("opt_v/")},
    )
    return ckpt


def write_metric_log(history: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "top1_retrieval"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["lr"])), repr(float(row["top1_retrieval"]))])


# -- pre-training ----------------------------------------------------------------------------


def init_encoders(cfg: TrainConfig, node_dim: int, grid_size: int) -> dict[str, EncoderParams]:
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    makers = {
        "crystal": lambda s: init_crystal(cfg.d, node_dim, hidden=cfg.crystal_hidden, seed=s),
        "dos": lambda s: init_dos(cfg.d, heads=cfg.dos_heads, blocks=cfg.dos_blocks, seed=s),
        "density": lambda s: init_density(cfg.d, grid_size=grid_size, channels=tuple(cfg.density_channels), seed=s),
    }
    # seeds are tied to the modality, not its position in the loss
    order = ("crystal", "dos", "density")
    return {m: makers[m](int(seeds[order.index(m)])) for m in cfg.modalities}


def objective(kind: str, embeddings: Sequence[ad.Tensor], tau, lam: float) -> ad.Tensor:
    """Batch-summed loss for ``kind``; the first embedding is the anchor (crystal)."""
    if kind in ("clip_dos", "clip_density"):
        return losses.clip_loss(embeddings[0], embeddings[1], tau)
    if kind == "allpairs":
        return losses.allpairs_clip_loss(embeddings, tau)
    if kind == "anchored":
        return losses.anchored_clip_loss(embeddings[0], embeddings[1:], tau)
    if kind == "tensorclip":
        return losses.tensor_clip_loss(*embeddings, tau)
    if kind == "barlow3d":
        return losses.barlow3d_loss(*embeddings, lam)
    raise ValueError(f"unknown loss {kind!r}")


def _tau_tensor(log_tau: ad.Tensor) -> ad.Tensor:
    return ad.exp(ad.clip(log_tau, math.log(losses.TAU_MIN), math.log(losses.TAU_MAX)))


def batch_loss(ckpt_params: Mapping[str, ad.Tensor], encoders: Mapping[str, EncoderParams], batch: Dataset, cfg: TrainConfig):
    """Per-sample-mean loss and the embeddings for one batch."""
    embs = []
    for m in cfg.modalities:
        w = {k[len(m) + 1 :]: v for k, v in ckpt_params.items() if k.startswith(m + "/")}
        embs.append(forward(batch.payloads(m), w, encoders[m]))
    tau = _tau_tensor(ckpt_params["extra/log_tau"]) if "extra/log_tau" in ckpt_params else cfg.tau
    loss = objective(cfg.loss_kind, embs, tau, cfg.lam) / float(len(batch))
    return loss, embs


def _require(data: Dataset, modalities: Sequence[str]) -> None:
    missing = set(modalities) - set(data.modality_mask)
    if missing:
        lacking = [r.id for r in data if not set(modalities) <= r.modalities]
        if lacking:
            raise ModalityMissingError(f"{len(lacking)} records lack {sorted(missing)} (e.g. {lacking[0]})")


def _probe_shapes(data: Dataset) -> tuple[int, int]:
    node_dim, grid = 1, 1
    for r in data:
        if r.crystal is not None:
            node_dim = r.crystal.node_features.shape[1]
        if r.density is not None:
            grid = r.density.grid_size
        if r.crystal is not None and r.density is not None:
            break
    return node_dim, grid


def new_checkpoint(cfg: TrainConfig, data: Dataset) -> Checkpoint:
    node_dim, grid = _probe_shapes(data)
    encoders = init_encoders(cfg, node_dim, grid)
    extra = {"log_tau": np.array(math.log(cfg.tau))} if (cfg.loss_kind in CLIP_FAMILY and cfg.learn_tau) else {}
    return Checkpoint(encoders, extra, AdamState(), 0, cfg.to_dict(), [])


def pretrain(cfg: TrainConfig, data: Dataset, out_dir: str | Path | None = None) -> Checkpoint:
    """Align the modality encoders on ``data`` (all of it is training data)."""
    cfg.validate()
    _require(data, cfg.modalities)
    ckpt = new_checkpoint(cfg, data)
    n_batches = len(data) // cfg.batch_size
    if cfg.epochs > 0 and n_batches == 0:
        raise ValueError(f"dataset of {len(data)} is smaller than one batch of {cfg.batch_size}")
    total = cfg.epochs * n_batches
    params = ckpt.flat_params()
    state = ckpt.opt_state
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        losses_ep, top1_ep = [], []
        for b in range(n_batches):
            batch = data.subset(perm[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            holder = {}

            def fn(P, batch=batch):
                loss, embs = batch_loss(P, ckpt.encoders, batch, cfg)
                holder["embs"] = embs
                return loss

            graph = ad.LossGraph(fn, params)
            value = graph.forward()
            if not math.isfinite(value):
                raise NonFiniteLossError(f"{cfg.loss_kind}: non-finite loss {value} at epoch {epoch}, batch {b}")
            grads, _ = clip_by_global_norm(graph.gradients, cfg.grad_clip)
            lr = lr_at(step, total, cfg)
            params, state = optimizer_step(
                params, grads, state, lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps, no_decay=("extra/log_tau",)
            )
            step += 1
            losses_ep.append(value)
            embs = holder["embs"]
            top1_ep.append(topk_retrieval(embs[0].data, embs[1].data, 1))
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses_ep)),
            "lr": lr_at(step, total, cfg),
            "top1_retrieval": float(np.mean(top1_ep)),
        }
        ckpt.history.append(row)
        log.info("epoch %d loss %.5f top1 %.3f", epoch, row["loss"], row["top1_retrieval"])
    ckpt.load_flat(params)
    ckpt.opt_state = state
    ckpt.epoch = cfg.epochs
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out / "checkpoint.mmck")
        write_metric_log(ckpt.history, out / "metrics.csv")
    return ckpt


# -- fine-tuning -------------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 120
    epochs: int = 30
    lrs: tuple[float, ...] = FINETUNE_SWEEP
    warmup_epochs: int = 10
    weight_decay: float = 0.0
    seed: int = 0
    split_fracs: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> "FinetuneConfig":
        if self.batch_size < 1 or self.epochs < 1 or not self.lrs:
            raise ValueError("finetune needs batch_size >= 1, epochs >= 1 and a non-empty sweep")
        if self.epochs <= self.warmup_epochs:
            raise ValueError("epochs must exceed warmup_epochs")
        if any(lr <= 0 for lr in self.lrs):
            raise ValueError("sweep learning rates must be positive")
        return self


@dataclass
class FinetuneResult:
    encoder: EncoderParams
    head: np.ndarray  # (d + 1,), weights then bias, in standardized target units
    target_mean: float
    target_std: float
    best_lr: float
    best_epoch: int  # 1-based
    test_mae: float
    val_history: dict[float, list[float]]

    def predict(self, graphs) -> np.ndarray:
        emb = forward(graphs, self.encoder.weights, self.encoder).data
        return (emb @ self.head[:-1] + self.head[-1]) * self.target_std + self.target_mean


def select_best(history: Sequence[float]) -> int:
    """0-based index of the lowest validation error (first on ties)."""
    if not history:
        raise ValueError("empty validation history")
    return int(np.argmin(np.asarray(history, dtype=np.float64)))


def _predict(enc: EncoderParams, head: np.ndarray, data: Dataset) -> np.ndarray:
    emb = forward(data.payloads("crystal"), enc.weights, enc).data
    return emb @ head[:-1] + head[-1]


def finetune(
    ckpt: "Checkpoint | EncoderParams",
    labeled: Dataset,
    prop: str,
    cfg: FinetuneConfig = FinetuneConfig(),
) -> FinetuneResult:
    """Train crystal encoder + linear head per swept LR; keep the global
    argmin-validation (LR, epoch) snapshot and report its test MAE."""
    cfg.validate()
    base = ckpt.encoders["crystal"] if isinstance(ckpt, Checkpoint) else ckpt
    if base.kind != "crystal":
        raise ValueError("fine-tuning needs a crystal encoder")
    _require(labeled, ("crystal",))
    missing = [r.id for r in labeled if prop not in r.properties]
    if missing:
        raise PropertyMissingError(f"{len(missing)} records lack property {prop!r} (e.g. {missing[0]})")
    train, val, test = split_dataset(labeled, SplitSpec(*cfg.split_fracs, seed=cfg.seed))
    y = lambda ds: np.array([r.properties[prop] for r in ds])  # noqa: E731
    y_train, y_val, y_test = y(train), y(val), y(test)
    mu, sd = float(y_train.mean()), float(y_train.std()) or 1.0

    d = base.embed_dim
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * n_batches
    best = (math.inf, None)
    histories: dict[float, list[float]] = {}
    for li, lr_peak in enumerate(cfg.lrs):
        rng = np.random.default_rng([cfg.seed, li])
        enc = base.copy()
        head = np.concatenate([rng.uniform(-1, 1, d) / math.sqrt(d), [0.0]])
        params = {**{f"enc/{k}": v for k, v in enc.weights.items()}, "head": head}
        state = AdamState()
        sched = replace(TrainConfig(), peak_lr=lr_peak, epochs=cfg.epochs, warmup_epochs=cfg.warmup_epochs)
        hist = []
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(len(train))
            for b in range(n_batches):
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = train.subset(idx)
                target = (y_train[idx] - mu) / sd

                def fn(P, batch=batch, target=target):
                    w = {k[4:]: v for k, v in P.items() if k.startswith("enc/")}
                    emb = forward(batch.payloads("crystal"), w, enc)
                    pred = ad.matmul(emb, ad.reshape(P["head"][:-1], (d, 1))) + P["head"][-1]
                    return ad.mean(ad.square(ad.reshape(pred, (-1,)) - target))

                graph = ad.LossGraph(fn, params)
                value = graph.forward()
                if not math.isfinite(value):
                    raise NonFiniteLossError(f"finetune: non-finite loss at lr {lr_peak}, epoch {epoch}")
                params, state = optimizer_step(params, graph.gradients, state, lr_at(step, total, sched), cfg.weight_decay)
                step += 1
            enc.weights = {k[4:]: v for k, v in params.items() if k.startswith("enc/")}
            val_mae = float(np.mean(np.abs(_predict(enc, params["head"], val) * sd + mu - y_val)))
            hist.append(val_mae)
            if val_mae < best[0]:
                best = (val_mae, (lr_peak, epoch, enc.copy(), params["head"].copy()))
        histories[lr_peak] = hist
        log.info("finetune lr %.0e best val MAE %.4f", lr_peak, min(hist))
    _, (best_lr, best_epoch, best_enc, best_head) = best
    test_mae = float(np.mean(np.abs(_predict(best_enc, best_head, test) * sd + mu - y_test)))
    return FinetuneResult(best_enc, best_head, mu, sd, best_lr, best_epoch, test_mae, histories)


def scratch_encoder(ckpt: Checkpoint, seed: int | None = None) -> EncoderParams:
    """Freshly initialized crystal encoder with the checkpoint's architecture."""
    p = ckpt.encoders["crystal"]
    cfg = TrainConfig.from_dict(ckpt.config) if ckpt.config else TrainConfig(d=p.embed_dim)
    s = cfg.seed if seed is None else seed
    state = np.random.SeedSequence(s).generate_state(3)
    return init_crystal(p.embed_dim, p.config["node_dim"], hidden=p.config["hidden"], rounds=p.config["rounds"], seed=int(state[0]))
