"""Command-line entry point: ``visreformer {verify,bench,train,eval,inspect}``.

Exit codes: 0 success, 1 invariant or fairness failure, 2 usage error,
3 I/O or ingestion error.  Every run writes ``manifest.json`` (resolved
config, seed, artifact version, thread count) beside its outputs.  The
default output root is ``$VISREFORMER_OUT`` (else ``./runs``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, faults
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FairnessError,
    IngestionError,
    InternalError,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "VISREFORMER_OUT"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _out_dir(args, verb: str) -> Path:
    root = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), verb)
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, verb: str, config: dict, seed: int, threads: int | None = None, extra=None):
    manifest = {
        "verb": verb,
        "argv": sys.argv[1:],
        "artifact_version": __version__,
        "seed": seed,
        "threads": threads,
        "config": config,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _int_list(text: str, flag: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from exc
    if not values:
        raise UsageError(f"{flag} is empty")
    return values


def parse_override(item: str) -> tuple:
    """``a.b=value`` -> (["a", "b"], value); values are parsed as JSON when possible."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        path, value = parse_override(item)
        node = doc
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {item!r} descends into a non-object")
        node[path[-1]] = value
    return doc


# ---------------------------------------------------------------- verbs

def cmd_verify(args) -> int:
    from .verify import SCOPES, run_verify

    if args.scope not in SCOPES:
        raise UsageError(f"unknown scope {args.scope!r}; choose from {', '.join(SCOPES)}")
    if args.inject_fault:
        try:
            faults.inject(args.inject_fault)
        except (PermissionError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    out = _out_dir(args, "verify")

    def progress(res):
        if not args.quiet:
            print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}  ({res.seconds:.2f}s)")

    try:
        report = run_verify(args.scope, args.seed, progress)
    finally:
        faults.clear()
    doc = report.to_dict()
    doc["injected_fault"] = args.inject_fault
    report_path = Path(args.report) if args.report else out / "verify.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    _write_manifest(out, "verify", {"scope": args.scope, "inject_fault": args.inject_fault}, args.seed)
    if not report.passed:
        print(f"invariant failures: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{len(report.results)} invariants passed; report: {report_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .attention import AttentionConfig
    from .bench import emit_report, fit_scaling, sweep_attention
    from .core import RngStream

    n_values = _int_list(args.n, "--n")
    if any(n < 1 for n in n_values) or n_values != sorted(set(n_values)):
        raise UsageError("--n must be strictly ascending positive integers")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants or any(v not in ("dense", "lsh") for v in variants):
        raise UsageError("--variants must list dense and/or lsh")
    if not args.counts_only and args.trials < 3:
        raise UsageError("--trials must be >= 3 for timed sweeps")
    try:
        cfg = AttentionConfig(args.heads, args.model_dim, bucket_size=args.bucket_size, n_rounds=args.n_rounds,
                              lookback=args.lookback)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    dtype = np.float32 if args.dtype == "float32" else np.float64
    records = sweep_attention(n_values, cfg, trials=args.trials, rng=RngStream(args.seed), variants=variants,
                              warmup=args.warmup, threads=args.threads, time_it=not args.counts_only, dtype=dtype,
                              max_dense_n=args.max_dense_n)
    fits = []
    for v in variants:
        recs = [r for r in records if r.variant == v]
        for metric in ("scores", "time"):
            try:
                fits.append(fit_scaling(recs, metric))
            except ContractError:
                pass  # too few points (or untimed) for this metric
    out = _out_dir(args, "bench")
    for fmt in ("csv", "json", "svg"):
        emit_report(records, fits, fmt, out / f"bench.{fmt}", seed=args.seed, threads=args.threads)
    _write_manifest(out, "bench", {"n": n_values, "variants": variants, "trials": args.trials,
                                   "warmup": args.warmup, "dtype": args.dtype, "counts_only": args.counts_only,
                                   "max_dense_n": args.max_dense_n, "attention": dataclasses.asdict(cfg)},
                    args.seed, args.threads)
    for r in records:
        t = "skipped" if r.skipped else f"{r.wall_time_s:.6f}s"
        print(f"{r.variant:5s} n={r.n:6d} scores/head={r.scores_evaluated:14.1f} time={t}")
    for f in fits:
        print(f"fit {f.variant} {f.metric}: exponent {f.exponent:.4f} (r2 {f.r2:.4f})")
    return EXIT_OK


def _resolve_train_config(args):
    from .train import TrainConfig

    doc = TrainConfig().to_dict()
    if args.config:
        try:
            doc.update(json.loads(Path(args.config).read_text()))
        except FileNotFoundError as exc:
            raise IngestionError(f"{args.config}: config file not found") from exc
    for flag in ("preset", "variant", "seed", "epochs", "data", "subset"):
        value = getattr(args, flag, None)
        if value is not None:
            doc["subset_per_class" if flag == "subset" else flag] = value
    doc = apply_overrides(doc, args.set)
    return TrainConfig.from_dict(doc)


def _datasets(cfg, model_cfg):
    from .core import RngStream
    from .data import load_cifar10, synth_twoclass

    if cfg.data == "synthetic":
        side = model_cfg.patch.image_height
        full = synth_twoclass(2 * cfg.synthetic_n, side, cfg.synthetic_separation, RngStream(cfg.seed).child(11))
        train = full.subset(np.arange(cfg.synthetic_n))
        val = full.subset(np.arange(cfg.synthetic_n, 2 * cfg.synthetic_n))
        val.split = "val"
        return train, val
    train, val = load_cifar10(cfg.data, cfg.subset_per_class)
    if cfg.val_limit is not None:
        val = val.subset(np.arange(min(cfg.val_limit, len(val))))
    return train, val


def _model_config(cfg):
    from .model import preset_config

    kwargs = dict(cfg.model)
    if cfg.data == "synthetic":
        kwargs.setdefault("n_classes", 2)
    try:
        return preset_config(cfg.preset, cfg.variant, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad model override: {exc}") from exc


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .model import build
    from .train import fit

    cfg = _resolve_train_config(args)
    model_cfg = _model_config(cfg)
    train, val = _datasets(cfg, model_cfg)
    model = build(model_cfg, cfg.seed)
    out = _out_dir(args, "train")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    _write_manifest(out, "train", {"train": cfg.to_dict(), "model": model_cfg.to_dict()}, cfg.seed,
                    extra={"train_samples": len(train), "val_samples": len(val)})

    def report(line):
        if not args.quiet:
            print(json.dumps(line, sort_keys=True))

    fit(model, train, cfg, val_set=val, metrics_path=out / "metrics.jsonl", on_epoch=report)
    save_checkpoint(model, out / "model.ckpt", extra={"epochs": cfg.epochs, "train": cfg.to_dict()})
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, read_header
    from .train import TrainConfig, evaluate

    header, _ = read_header(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    tc = TrainConfig.from_dict(header.get("extra", {}).get("train", {}))
    if args.data is not None:
        tc.data = args.data
    if args.subset is not None:
        tc.subset_per_class = args.subset
    _, val = _datasets(tc, model.config)
    report = evaluate(model, val)
    out = _out_dir(args, "eval")
    doc = report.to_dict()
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    _write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "data": tc.data}, header.get("seed"))
    print(json.dumps({k: doc[k] for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1")}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .bench import matched_capacity_check
    from .checkpoint import read_header
    from .model import analytic_param_count, preset_config

    if args.checkpoint:
        header, offset = read_header(args.checkpoint)
        n_params = sum(int(np.prod(e["shape"])) for e in header["parameters"])
        doc = {"checkpoint": str(args.checkpoint), "format_version": header["format_version"],
               "artifact_version": header["artifact_version"], "seed": header["seed"],
               "variant": header["config"]["variant"], "depth": header["config"]["depth"],
               "parameters": n_params, "tensors": len(header["parameters"]), "payload_offset": offset}
    else:
        overrides = apply_overrides({}, args.set)
        dense = preset_config(args.preset, "dense", **overrides)
        lsh = preset_config(args.preset, "lsh", **overrides)
        rep = matched_capacity_check(dense, lsh)
        doc = {"preset": args.preset, "n_tokens": dense.n_tokens, "depth": dense.depth,
               "embed_dim": dense.patch.embed_dim, "heads": dense.attn.heads,
               "params_dense": analytic_param_count(dense), "params_lsh": analytic_param_count(lsh),
               "param_delta": rep.param_delta, "expected_delta": rep.expected_delta, "matched": rep.passed}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK if doc.get("matched", True) else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visreformer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<verb> or ./runs/<verb>)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--quiet", action="store_true")

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--scope", default="all", help="core, tokenizer, attention, revblocks, gradients, model, "
                                                  "train, data, bench or all")
    v.add_argument("--report", help="path of the JSON report (default: <out>/verify.json)")
    v.add_argument("--inject-fault", help=argparse.SUPPRESS)
    common(v)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="attention scaling sweep")
    b.add_argument("--n", required=True, help="comma-separated ascending sequence lengths")
    b.add_argument("--variants", default="dense,lsh")
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--model-dim", type=int, default=64)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--bucket-size", type=int, default=16)
    b.add_argument("--n-rounds", type=int, default=2)
    b.add_argument("--lookback", type=int, default=1)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    b.add_argument("--counts-only", action="store_true", help="skip timing, read counters only")
    b.add_argument("--max-dense-n", type=int, default=None, help="do not time dense attention above this n")
    common(b)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--preset", choices=("cifar10", "imagenet100", "retinopathy"))
    t.add_argument("--variant", choices=("dense", "lsh"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--data", help="'synthetic' or a CIFAR-10 binary directory")
    t.add_argument("--subset", type=int, help="images per class for CIFAR-10")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. model.depth=2")
    common(t, seed=False)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--subset", type=int)
    common(e, seed=False)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="describe a checkpoint or a preset pair")
    g = i.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--preset", choices=("cifar10", "imagenet100", "retinopathy"))
    i.add_argument("--set", action="append", metavar="KEY=VALUE", help="preset_config override")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FairnessError as exc:
        print(f"fairness check failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (IngestionError, DataError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InternalError as exc:
        print(f"internal invariant failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
