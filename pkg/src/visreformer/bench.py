"""Attention efficiency sweep: score counts, timing, memory, scaling fits, reports.

Timing covers one attention sub-layer forward (projections included) under
``no_grad`` with a pinned BLAS thread count.  Score counts come from the
attention counters and do not depend on hardware.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import (
    AttentionConfig,
    DenseAttentionParams,
    LSHAttentionParams,
    ScoreCounter,
    dense_attention,
    lsh_attention,
    score_count,
)
from .core import RngStream, finite_checks, no_grad
from .errors import ContractError, FairnessError
from .model import ModelConfig, analytic_param_count
from .revblocks import activation_memory_estimate
from .tokenizer import TokenSequence

CSV_COLUMNS = ("variant", "n", "bucket_size", "n_rounds", "lookback", "scores_evaluated", "wall_time_s", "trials",
               "memory_estimate", "seed")


@dataclass
class BenchRecord:
    variant: str
    n: int
    bucket_size: int
    n_rounds: int
    lookback: int
    scores_evaluated: float  # per (item, head)
    wall_time_s: float  # median over trials; NaN when not timed
    trials: int
    memory_estimate: float  # floats, see attention_memory_estimate
    seed: int
    skipped: bool = False

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass
class ScalingFit:
    variant: str
    metric: str
    exponent: float
    intercept: float  # log2 of the metric at n = 1
    r2: float
    points: int


def attention_memory_estimate(variant: str, n: int, cfg: AttentionConfig, depth: int = 1) -> float:
    """Stored floats for a ``depth``-layer stack: activations, Q/K/V buffers, score buffer.

    The dense score buffer is ``H * n * n``; the LSH one is ``H * n * C`` with
    ``C = n_rounds * (1 + lookback) * bucket_size + 1`` candidate slots.
    """
    D, H = cfg.model_dim, cfg.heads
    if variant == "dense":
        return activation_memory_estimate(depth, n, D, reversible=False) + 3 * n * D + H * n * n
    C = cfg.n_rounds * (1 + cfg.lookback) * cfg.bucket_size + 1
    return activation_memory_estimate(depth, n, D, reversible=True) + 2 * n * D + H * n * C


def _params_for(variant: str, cfg: AttentionConfig, rng: RngStream, dtype):
    if variant == "dense":
        return DenseAttentionParams(dataclasses.replace(cfg, shared_qk=False), rng, dtype=dtype)
    return LSHAttentionParams(dataclasses.replace(cfg, shared_qk=True), rng, dtype=dtype)


def _run(variant, seq, cfg, params, hash_rng, counter=None):
    if variant == "dense":
        return dense_attention(seq, dataclasses.replace(cfg, shared_qk=False), params, counter)
    return lsh_attention(seq, dataclasses.replace(cfg, shared_qk=True), params, hash_rng, counter)


def sweep_inputs(n: int, D: int, rng: RngStream, dtype=np.float32) -> np.ndarray:
    """The token block for sweep point ``n``; identical for every variant."""
    return rng.child(0, n).normal((1, n, D)).astype(dtype)


def sweep_attention(n_values, cfg: AttentionConfig, trials: int = 3, rng: RngStream | None = None,
                    variants=("dense", "lsh"), warmup: int = 1, threads: int = 1, time_it: bool = True,
                    dtype=np.float32, max_dense_n: int | None = None) -> list:
    """One :class:`BenchRecord` per (variant, n).

    Inputs for a given ``n`` are drawn once and shared by all variants.  With
    ``time_it=False`` only the counters run (no attention output is formed).
    A point that raises ``MemoryError`` is recorded as skipped.
    """
    n_values = list(n_values)
    if not n_values or any(n < 1 for n in n_values) or n_values != sorted(n_values):
        raise ContractError("n_values must be a non-empty ascending list of positive integers")
    if time_it and (trials < 3 or warmup < 1):
        raise ContractError("timed sweeps need trials >= 3 and at least one warmup run")
    rng = rng or RngStream(0)
    records = []
    with threadpool_limits(limits=threads), finite_checks(False), no_grad():
        for n in n_values:
            x = sweep_inputs(n, cfg.model_dim, rng, dtype)
            seq = TokenSequence.unmasked(x)
            for variant in variants:
                params = _params_for(variant, cfg, rng.child(1), dtype)
                hash_rng = rng.child(2)
                rec = BenchRecord(variant, n, cfg.bucket_size, cfg.n_rounds, cfg.lookback, 0.0, math.nan,
                                  trials if time_it else 0, attention_memory_estimate(variant, n, cfg), rng.seed)
                try:
                    timed = time_it and (max_dense_n is None or variant != "dense" or n <= max_dense_n)
                    if timed:
                        # the first warmup call doubles as the counter readout
                        counter = ScoreCounter(variant)
                        _run(variant, seq, cfg, params, hash_rng, counter)
                        rec.scores_evaluated = counter.per_head
                        rec.wall_time_s = _time(lambda: _run(variant, seq, cfg, params, hash_rng), trials,
                                                warmup - 1)
                    elif variant == "dense":
                        rec.scores_evaluated = float(n * n)  # the dense counter is analytic
                    else:
                        rec.scores_evaluated = score_count(seq, cfg, params, hash_rng) / cfg.heads
                except MemoryError:
                    rec.skipped = True
                records.append(rec)
    return records


def _time(fn, trials: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def fit_scaling(records, metric: str = "scores") -> ScalingFit:
    """Least-squares line through ``(log2 n, log2 metric)``.

    The closed-form simple-regression formula is used on purpose: for exact
    power-law counts at power-of-two ``n`` every intermediate sum is an exact
    integer in floating point, so a quadratic count yields slope 2.0 exactly.
    """
    key = {"scores": "scores_evaluated", "time": "wall_time_s"}.get(metric)
    if key is None:
        raise ContractError(f"metric must be 'scores' or 'time', got {metric!r}")
    records = [r for r in records if not r.skipped and not math.isnan(getattr(r, key))]
    if len(records) < 4:
        raise ContractError(f"a scaling fit needs >= 4 points, got {len(records)}")
    variants = {r.variant for r in records}
    if len(variants) != 1:
        raise ContractError(f"fit one variant at a time, got {sorted(variants)}")
    ys = [getattr(r, key) for r in records]
    if min(ys) <= 0:
        raise ContractError(f"{metric} must be positive for a log-log fit")
    x = np.log2([float(r.n) for r in records])
    y = np.log2(ys)
    m = len(x)
    sx, sy, sxx, sxy = x.sum(), y.sum(), (x * x).sum(), (x * y).sum()
    slope = (m * sxy - sx * sy) / (m * sxx - sx * sx)
    intercept = (sy - slope * sx) / m
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(records[0].variant, metric, float(slope), float(intercept), float(r2), m)


# ---------------------------------------------------------------- fairness

@dataclass
class CapacityReport:
    passed: bool
    checked: dict  # field -> shared value
    dense_params: int
    lsh_params: int
    param_delta: int
    expected_delta: int


def matched_capacity_check(cfg_dense: ModelConfig, cfg_lsh: ModelConfig) -> CapacityReport:
    """Fail unless the two configs share depth, width, heads, patching and token count.

    The only permitted parameter gap is the shared-QK saving of
    ``depth * D * D``.
    """
    def fields(c: ModelConfig) -> dict:
        return {
            "depth": c.depth,
            "embed_dim": c.patch.embed_dim,
            "heads": c.attn.heads,
            "patch_size": c.patch.patch_size,
            "n_tokens": c.n_tokens,
            "image_size": (c.patch.image_height, c.patch.image_width),
            "hidden_dim": c.ffn.hidden_dim,
            "stem_channels": c.patch.stem_channels,
            "n_classes": c.n_classes,
        }

    if cfg_dense.variant != "dense" or cfg_lsh.variant != "lsh":
        raise FairnessError(["variant"], "expected one dense and one lsh config")
    a, b = fields(cfg_dense), fields(cfg_lsh)
    bad = [k for k in a if a[k] != b[k]]
    if bad:
        detail = ", ".join(f"{k} ({a[k]} vs {b[k]})" for k in bad)
        raise FairnessError(bad, f"configs are not capacity-matched: {detail}")
    pd, pl = analytic_param_count(cfg_dense), analytic_param_count(cfg_lsh)
    expected = a["depth"] * a["embed_dim"] ** 2
    return CapacityReport(pd - pl == expected, a, pd, pl, pd - pl, expected)


# ---------------------------------------------------------------- reports

def emit_report(records, fits, fmt: str, path, seed: int | None = None, threads: int | None = None) -> Path:
    """Write records (and fits) as ``csv``, ``json`` or ``svg``."""
    records = list(records)
    if not records:
        raise ContractError("no records to report")
    path = Path(path)
    seed = records[0].seed if seed is None else seed
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in records:
                if not r.skipped:
                    w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    elif fmt == "json":
        doc = {
            "seed": seed,
            "threads": threads,
            "columns": list(CSV_COLUMNS),
            "records": [dataclasses.asdict(r) for r in records],
            "fits": [dataclasses.asdict(f) for f in fits],
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True))
    elif fmt == "svg":
        _plot(records, fits, path, seed, threads)
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    return path


def read_csv(path) -> list:
    """Parse a CSV written by :func:`emit_report` back into records."""
    conv = {"n": int, "bucket_size": int, "n_rounds": int, "lookback": int, "trials": int, "seed": int,
            "scores_evaluated": float, "wall_time_s": float, "memory_estimate": float, "variant": str}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ContractError(f"unexpected CSV header {reader.fieldnames}")
        return [BenchRecord(**{k: conv[k](v) for k, v in row.items()}) for row in reader]


def _plot(records, fits, path, seed, threads):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = [("scores", "scores_evaluated", "score evaluations per head")]
    if any(not math.isnan(r.wall_time_s) for r in records):
        metrics.append(("time", "wall_time_s", "forward time [s]"))
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4), squeeze=False)
    for ax, (metric, key, label) in zip(axes[0], metrics):
        for variant in sorted({r.variant for r in records}):
            pts = [(r.n, getattr(r, key)) for r in records
                   if r.variant == variant and not r.skipped and not math.isnan(getattr(r, key))]
            if not pts:
                continue
            ns, ys = zip(*pts)
            line = ax.loglog(ns, ys, "o", base=2, label=variant)[0]
            for f in fits:
                if f.variant == variant and f.metric == metric:
                    grid = np.array([min(ns), max(ns)], dtype=float)
                    ax.loglog(grid, 2.0 ** (f.intercept + f.exponent * np.log2(grid)), "-", base=2,
                              color=line.get_color(), label=f"{variant} fit, slope {f.exponent:.3f}")
        ax.set_xlabel("sequence length n")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    fig.suptitle(f"seed {seed}, threads {threads}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Description": f"seed={seed} threads={threads}"})
    plt.close(fig)


__all__ = [
    "BenchRecord",
    "CSV_COLUMNS",
    "CapacityReport",
    "ScalingFit",
    "attention_memory_estimate",
    "emit_report",
    "fit_scaling",
    "matched_capacity_check",
    "read_csv",
    "sweep_attention",
    "sweep_inputs",
]
