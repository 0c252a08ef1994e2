"""Command-line entry point: ``mmalign <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
Every command writes ``manifest.json`` (the only file carrying a timestamp)
into its output directory before doing any heavy work.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import embed_all
from .errors import FormatError, NonFiniteLossError
from .evalkit import retrieval_report
from .screening import (
    PAPER_INTERPRETABILITY_SAMPLE,
    best_of_n_curve,
    build_index,
    export_embeddings,
    project_2d,
    save_index,
    write_projection_csv,
)
from .synthdata import (
    GeneratorSpec,
    format_generator_spec,
    generate_dataset,
    load_dos_json,
    parse_generator_spec,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .trainer import (
    LOSS_MODALITIES,
    PRESETS,
    FinetuneConfig,
    TrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    scratch_encoder,
)

log = logging.getLogger("mmalign")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def read_kv(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(cls, values: dict[str, str]) -> dict:
    kinds = {f.name: f for f in fields(cls)}
    default = cls()
    out = {}
    for k, v in values.items():
        if k not in kinds:
            raise ConfigError(f"unknown {cls.__name__} key {k!r}")
        cur = getattr(default, k)
        try:
            if isinstance(cur, bool):
                out[k] = v.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, tuple):
                conv = type(cur[0]) if cur else float
                out[k] = tuple(conv(x) for x in v.split(",") if x.strip())
            else:
                out[k] = type(cur)(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r}") from exc
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def write_manifest(out: Path, command: str, config_path, resolved: dict, seed) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved_config": resolved,
        "output_dir": str(out),
        "seed": seed,
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _split_part(data, cfg: TrainConfig, which: str):
    if which == "all":
        return data
    parts = dict(zip(("train", "val", "test"), split_dataset(data, cfg.split)))
    if which not in parts:
        raise ConfigError(f"unknown split {which!r}")
    return parts[which]


# -- commands ----------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n is None or args.n < 1:
        raise ConfigError("--n must be a positive integer")
    spec = parse_generator_spec(Path(args.config).read_text(encoding="utf-8")) if args.config else GeneratorSpec()
    if args.dropout is not None:
        spec = replace(spec, modality_dropout=args.dropout).validate()
    out = Path(args.out)
    write_manifest(out, "gen", args.config, {"n": args.n, "seed": args.seed, **asdict(spec)}, args.seed)
    data = generate_dataset(args.n, args.seed, spec)
    write_dataset(data.records, out)
    (out / "generator.cfg").write_text(format_generator_spec(spec), encoding="utf-8")
    print(f"wrote {len(data)} materials to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    values: dict = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[args.preset])
    if args.config:
        values.update(_coerce(TrainConfig, read_kv(args.config)))
    flags = {
        "loss_kind": args.loss,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "peak_lr": args.lr,
        "weight_decay": args.wd,
        "warmup_epochs": args.warmup,
        "d": args.d,
        "tau": args.tau,
        "lam": args.lam,
        "seed": args.seed,
        "split_seed": args.split_seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig(**values).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    write_manifest(out, "pretrain", args.config, cfg.to_dict(), cfg.seed)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), sort_keys=True))
        return EXIT_OK
    data = read_dataset(args.data)
    train = _split_part(data, cfg, args.split)
    ckpt = pretrain(cfg, train, out)
    final = ckpt.history[-1]["loss"] if ckpt.history else float("nan")
    print(f"final loss {final:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    out = Path(args.out)
    write_manifest(out, "eval", None, {"ckpt": args.ckpt, "split": args.split, "k": args.k}, cfg.seed)
    part = _split_part(read_dataset(args.data), cfg, args.split)
    embs = {m: embed_all(part.payloads(m), p) for m, p in ckpt.encoders.items()}
    report = retrieval_report(embs, _int_list(args.k))
    report.write_csv(out / "retrieval.csv")
    report.write_columns(out / "retrieval.txt")
    for pair, k, acc in report.rows():
        print(f"{pair} top-{k}: {acc:.4f}")
    return EXIT_OK


def cmd_screen(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if "dos" not in ckpt.encoders:
        raise ConfigError("checkpoint has no DOS encoder")
    cfg = TrainConfig.from_dict(ckpt.config)
    ns = sorted(set(_int_list(args.n)))
    out = Path(args.out)
    write_manifest(out, "screen", None, {"ckpt": args.ckpt, "n": ns, "target_dos": args.target_dos}, cfg.seed)
    data = read_dataset(args.data)
    train, _, test = split_dataset(data, cfg.split)
    library = train if args.library == "train" else data
    idx = build_index(library, ckpt.encoders["crystal"])
    save_index(idx, out / "index.mmix")
    lookup = {r.id: r.dos for r in library if r.dos is not None}
    if args.target_dos:
        targets = [(Path(args.target_dos).stem, load_dos_json(args.target_dos))]
    else:
        targets = [(r.id, r.dos) for r in test.records[: args.max_targets] if r.dos is not None]
    with open(out / "screening.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_id", "n", "best_candidate", "best_mae", "nearest_id", "nearest_similarity"])
        per_n: dict[int, list[float]] = {n: [] for n in ns}
        for tid, curve in targets:
            for n, res in zip(ns, best_of_n_curve(idx, curve, lookup, ckpt.encoders["dos"], ns, tid)):
                w.writerow([tid, n, res.best_candidate, repr(res.best_mae), res.neighbors[0][0], repr(res.neighbors[0][1])])
                per_n[n].append(res.best_mae)
    with open(out / "best_of_n.txt", "w", encoding="utf-8") as fh:
        fh.write("n mean_best_mae\n")
        for n in ns:
            fh.write(f"{n} {np.mean(per_n[n]):.6f}\n")
            print(f"n={n}: mean best MAE {np.mean(per_n[n]):.4f} over {len(per_n[n])} targets")
    return EXIT_OK


def cmd_finetune(args) -> int:
    fcfg = FinetuneConfig(
        batch_size=args.batch,
        epochs=args.epochs,
        lrs=_float_list(args.sweep),
        warmup_epochs=args.warmup,
        seed=args.seed,
    )
    try:
        fcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    write_manifest(out, "finetune", None, {"ckpt": args.ckpt, "property": args.property, "scratch": args.scratch, **asdict(fcfg)}, args.seed)
    ckpt = load_checkpoint(args.ckpt)
    start = scratch_encoder(ckpt) if args.scratch else ckpt
    labeled = read_dataset(args.data)
    res = finetune(start, labeled, args.property, fcfg)
    with open(out / "finetune.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lr", "epoch", "val_mae"])
        for lr, hist in res.val_history.items():
            for e, v in enumerate(hist, start=1):
                w.writerow([repr(lr), e, repr(v)])
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["property", "init", "best_lr", "best_epoch", "test_mae"])
        w.writerow([args.property, "scratch" if args.scratch else "pretrained", repr(res.best_lr), res.best_epoch, repr(res.test_mae)])
    print(f"test MAE {res.test_mae:.6f} (lr {res.best_lr:g}, epoch {res.best_epoch})")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    out = Path(args.out)
    data = read_dataset(args.data)
    if args.sample == "all":
        sample = len(data)
    elif args.sample == "paper":
        sample = PAPER_INTERPRETABILITY_SAMPLE
    else:
        try:
            sample = int(args.sample)
        except ValueError as exc:
            raise ConfigError(f"--sample must be an integer, 'all' or 'paper', got {args.sample!r}") from exc
    write_manifest(out, "export", None, {"ckpt": args.ckpt, "sample": sample, "modality": args.modality}, args.seed)
    table = export_embeddings(ckpt, data, sample, args.seed, out / "embeddings.csv", args.modality)
    write_projection_csv(table.ids, project_2d(table), out / "projection.csv")
    print(f"exported {len(table.ids)} embeddings")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="generator spec file (key = value)")
    g.add_argument("--dropout", type=float, help="per-modality drop probability")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="align modality encoders")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    t.add_argument("--loss", choices=sorted(LOSS_MODALITIES))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--wd", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--tau", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--split", default="train", choices=["train", "all"])
    t.add_argument("--dry-run", action="store_true", help="resolve and print the config only")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="cross-modal top-k retrieval")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--k", default="1,5,10")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("screen", help="best-of-n inverse design against DOS targets")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--target-dos", help="JSON file with energies/values; default: held-out test DOS curves")
    s.add_argument("--n", default="1,5,10,50")
    s.add_argument("--library", default="train", choices=["train", "all"])
    s.add_argument("--max-targets", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_screen)

    f = sub.add_parser("finetune", help="linear-probe fine-tuning with an LR sweep")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--property", required=True)
    f.add_argument("--sweep", default="1e-3,1e-4,1e-5")
    f.add_argument("--epochs", type=int, default=30)
    f.add_argument("--warmup", type=int, default=10)
    f.add_argument("--batch", type=int, default=120)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--scratch", action="store_true", help="re-initialize the crystal encoder")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune)

    x = sub.add_parser("export", help="export embeddings and a 2-D projection")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", default="all", help="count, 'all', or 'paper'")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--modality", default="crystal")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def _thread_limit():
    n = os.environ.get("MMALIGN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
    except ValueError:
        print("error: MMALIGN_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
