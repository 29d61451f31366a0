"""Self-contained invariant suites behind ``visreformer verify``.

Each check returns ``(passed, detail)``; :func:`run_verify` runs the checks
of a scope and collects a JSON-serialisable report.  Checks are small enough
that ``--scope all`` finishes in well under a minute.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .attention import (
    AttentionConfig,
    DenseAttentionParams,
    LSHAttentionParams,
    ScoreCounter,
    build_chunks,
    candidate_sets,
    dense_attention,
    lsh_attention,
    record_buckets,
)
from .bench import fit_scaling, sweep_attention, sweep_inputs
from .core import (
    RngStream,
    Tensor,
    backward,
    conv2d,
    cross_entropy,
    layer_norm,
    no_grad,
    parameter,
    softmax_rows,
    stable_sort_with_permutation,
)
from .data import AugmentPolicy, augment, synth_twoclass
from .errors import ConfigError
from .gradcheck import check_gradients
from .model import PRESETS, build, forward, pool_tokens, preset_config
from .revblocks import (
    AttentionSublayer,
    ChunkedFFNConfig,
    FeedForward,
    FeedForwardSublayer,
    ReversibleBlock,
    chunked_ffn,
    rev_forward,
    rev_inverse,
    reversible_stack,
)
from .tokenizer import TokenSequence
from .train import (
    AccumConfig,
    OptimizerState,
    Schedule,
    accumulate_and_step,
    evaluate,
    lr_at,
)

SCOPES = ("core", "tokenizer", "attention", "revblocks", "gradients", "model", "train", "data", "bench", "all")
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: dict = field(default_factory=dict)


@dataclass
class VerifyReport:
    scope: str
    seed: int
    version: str
    passed: bool
    results: list

    def to_dict(self) -> dict:
        return {"scope": self.scope, "seed": self.seed, "version": self.version, "passed": self.passed,
                "results": [asdict(r) for r in self.results]}

    @property
    def failures(self) -> list:
        return [r.name for r in self.results if not r.passed]


# ---------------------------------------------------------------- helpers

def _shared_qk_pair(cfg: AttentionConfig, rng: RngStream):
    lsh = LSHAttentionParams(cfg, rng)
    dense = DenseAttentionParams(AttentionConfig(cfg.heads, cfg.model_dim, shared_qk=True), rng)
    for name in ("wqk", "wv", "wo", "bo"):
        setattr(dense, name, getattr(lsh, name))
    return lsh, dense


def _tiny_model_config(variant: str, **kw):
    args = dict(embed_dim=8, heads=2, depth=2, stem_channels=2, patch_size=2, image_size=8, bucket_size=4,
                n_classes=3)
    args.update(kw)
    return preset_config("cifar10", variant, **args)


def _rev_block(D: int, rng: RngStream, variant: str = "lsh", scale: float = 0.3):
    cfg = AttentionConfig(heads=2, model_dim=D, bucket_size=4, shared_qk=variant == "lsh")
    f = AttentionSublayer(cfg, variant, rng.child(0), hash_rng=rng.child(9))
    g = FeedForwardSublayer(D, ChunkedFFNConfig(2 * D, chunk_len=3), rng.child(1))
    for i, p in enumerate(list(f.parameters().values()) + list(g.parameters().values())):
        if p.ndim == 2:
            p.data[...] = rng.child(7, i).normal(p.shape, scale=scale)
    return ReversibleBlock(f, g)


def _scaled_model(variant: str, rng: RngStream):
    m = build(_tiny_model_config(variant), rng.child(0))
    for i, (_, p) in enumerate(m.named_parameters()):
        p.data[...] = rng.child(1, i).normal(p.shape, scale=0.3)
    return m


def model_gradient_samples(variant: str, seed: int, per_param: int = 3) -> list:
    """Finite-difference samples for a depth-2, n=16 model of ``variant``.

    Weights are drawn at scale 0.3 so gradients sit well above the
    finite-difference noise floor; the LSH hash assignment is held to one
    smooth piece through ``record_buckets``.
    """
    rng = RngStream(seed)
    m = _scaled_model(variant, rng)
    x = rng.child(2).uniform(size=(2, 3, 8, 8))
    y = np.array([0, 2])

    def piece():
        with record_buckets() as digests, no_grad():
            forward(m, x)
        return tuple(digests)

    return check_gradients(lambda: cross_entropy(forward(m, x), y), m.parameters(), rng.child(3),
                           per_param=per_param, h=1e-4, points=5, piece_fn=piece)


def _grad_detail(samples) -> tuple:
    worst = max(samples, key=lambda s: s.rel_err)
    return worst.rel_err < GRAD_TOL, {"samples": len(samples), "worst_rel_err": worst.rel_err,
                                      "worst_param": worst.name, "tolerance": GRAD_TOL}


# ---------------------------------------------------------------- core

def check_softmax_rows(seed):
    rng = RngStream(seed)
    worst = {}
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-5)):
        x = rng.child(len(worst)).normal((64, 33), scale=20.0).astype(dtype)
        mask = rng.child(9).uniform(size=(64, 33)) < 0.7
        mask[:, 0] = True
        p = softmax_rows(Tensor(x), mask=mask).data
        worst[np.dtype(dtype).name] = float(np.abs(p.sum(axis=-1) - 1.0).max())
        if worst[np.dtype(dtype).name] >= tol or np.any(p[~mask] != 0):
            return False, worst
    return True, worst


def check_sort_round_trip(seed):
    keys = RngStream(seed).integers(0, 5, size=200)
    s, perm, inv = stable_sort_with_permutation(keys)
    ok = np.array_equal(s[inv], keys) and np.array_equal(keys[perm], s) and np.array_equal(perm[inv], np.arange(200))
    ties_stable = all(perm[i] < perm[i + 1] for i in range(199) if s[i] == s[i + 1])
    return bool(ok and ties_stable), {"n": 200}


def check_determinism(seed):
    cfg = _tiny_model_config("lsh")
    x = RngStream(seed).uniform(size=(2, 3, 8, 8))
    a = forward(build(cfg, seed), x).data
    b = forward(build(cfg, seed), x).data
    return a.tobytes() == b.tobytes(), {}


# ---------------------------------------------------------------- tokenizer

def check_patch_locality(seed):
    from .core.module import Linear
    from .tokenizer import PatchConfig, patchify_project

    cfg = PatchConfig(4, 6, 2, 3, stem_channels=2)
    proj = Linear(cfg.patch_dim, 3, RngStream(seed))
    x = RngStream(seed).child(1).normal((1, 2, 4, 6))
    y = x.copy()
    y[0, :, 2:4, 2:4] = y[0, :, 2:4, 2:4][:, ::-1, ::-1]
    a, b = patchify_project(x, cfg, proj).tokens.data[0], patchify_project(y, cfg, proj).tokens.data[0]
    changed = [int(i) for i in np.flatnonzero(np.any(a != b, axis=1))]
    return changed == [4], {"changed_tokens": changed}


def check_stem_preserves_count(seed):
    out = {}
    for name, p in PRESETS.items():
        cfg = preset_config(name, "dense")
        out[name] = cfg.n_tokens
        if cfg.n_tokens != (p["image"] // p["patch"]) ** 2:
            return False, out
    ok = out == {"cifar10": 256, "imagenet100": 256, "retinopathy": 784}
    cfg = _tiny_model_config("dense")
    m = build(cfg, seed)
    seq = m.tokenizer(RngStream(seed).uniform(size=(1, 3, 8, 8)))
    return ok and seq.n == cfg.n_tokens, out


def check_matched_tokens(seed):
    x = RngStream(seed).uniform(size=(2, 3, 8, 8))
    a = build(_tiny_model_config("dense"), seed).tokenizer(x).tokens.data
    b = build(_tiny_model_config("lsh"), seed).tokenizer(x).tokens.data
    return a.tobytes() == b.tobytes(), {}


# ---------------------------------------------------------------- attention

def check_degeneracy(seed):
    worst = 0.0
    for s in range(5):
        rng = RngStream(seed).child(s)
        cfg = AttentionConfig(heads=2, model_dim=8, bucket_size=16, shared_qk=True)
        lsh, dense = _shared_qk_pair(cfg, rng.child(0))
        seq = TokenSequence.unmasked(rng.child(1).normal((2, 16, 8)))
        a = lsh_attention(seq, cfg, lsh, rng.child(2)).tokens.data
        b = dense_attention(seq, AttentionConfig(2, 8, shared_qk=True), dense).tokens.data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst < 1e-10, {"max_abs_err": worst, "seeds": 5}


def check_monotonicity(seed):
    rng = RngStream(seed)
    base = AttentionConfig(heads=2, model_dim=8, bucket_size=4, n_rounds=1, lookback=0, shared_qk=True)
    params = LSHAttentionParams(base, rng.child(0))
    seq = TokenSequence.unmasked(rng.child(1).normal((1, 24, 8)))
    sizes = []
    prev = None
    for rounds, lookback in ((1, 0), (2, 0), (2, 1), (3, 1), (3, 2)):
        cfg = AttentionConfig(2, 8, bucket_size=4, n_rounds=rounds, lookback=lookback, shared_qk=True)
        sets = candidate_sets(seq, cfg, params, rng.child(2))
        flat = [s for per_head in sets[0] for s in per_head]
        if prev is not None and not all(a <= b for a, b in zip(prev, flat)):
            return False, {"sizes": sizes, "failed_at": [rounds, lookback]}
        sizes.append(sum(len(s) for s in flat))
        prev = flat
    return True, {"sizes": sizes}


def check_counter_exactness(seed):
    rng = RngStream(seed)
    detail = {}
    cfg = _tiny_model_config("dense")
    c = ScoreCounter("dense")
    forward(build(cfg, seed), rng.uniform(size=(2, 3, 8, 8)), c)
    detail["dense"] = c.scores_evaluated
    ok = c.scores_evaluated == 2 * 16 * 16 * cfg.attn.heads * cfg.depth
    acfg = AttentionConfig(heads=2, model_dim=8, bucket_size=4, shared_qk=True)
    params = LSHAttentionParams(acfg, rng.child(0))
    seq = TokenSequence(rng.child(1).normal((2, 18, 8)), (np.arange(18) < [[18], [13]]).astype(np.int8))
    c = ScoreCounter("lsh")
    lsh_attention(seq, acfg, params, rng.child(2), c)
    expected = sum(len(s) for per_b in candidate_sets(seq, acfg, params, rng.child(2)) for per_h in per_b
                   for s in per_h)
    detail["lsh"] = [c.scores_evaluated, expected]
    return ok and c.scores_evaluated == expected, detail


def check_permutation_safety(seed):
    ids = RngStream(seed).integers(0, 6, size=32)
    a = build_chunks(ids, 4)
    ok = np.array_equal(a.permutation[a.inverse], np.arange(32))
    ok &= np.array_equal(np.sort(np.concatenate([a.chunk(c) for c in range(a.n_chunks)])), np.arange(32))
    return bool(ok), {"n": 32}


def check_masking(seed):
    rng = RngStream(seed)
    cfg = AttentionConfig(heads=2, model_dim=8, bucket_size=4, shared_qk=True)
    params = LSHAttentionParams(cfg, rng.child(0))
    tokens = rng.child(1).normal((1, 14, 8))
    mask = (np.arange(14) < 10).astype(np.int8)[None]
    sets = candidate_sets(TokenSequence(tokens, mask), cfg, params, rng.child(2))
    leaked = sorted({j for per_h in sets[0] for s in per_h for j in s if j >= 10})
    other = tokens.copy()
    other[0, 10:] = 99.0
    a = lsh_attention(TokenSequence(tokens, mask), cfg, params, rng.child(2)).tokens.data[0, :10]
    b = lsh_attention(TokenSequence(other, mask), cfg, params, rng.child(2)).tokens.data[0, :10]
    return not leaked and np.array_equal(a, b), {"leaked_keys": leaked}


def check_attention_gradients(seed, variant):
    rng = RngStream(seed)
    if variant == "dense":
        cfg = AttentionConfig(heads=2, model_dim=4)
        p = DenseAttentionParams(cfg, rng.child(0))
    else:
        cfg = AttentionConfig(heads=2, model_dim=4, bucket_size=4, shared_qk=True)
        p = LSHAttentionParams(cfg, rng.child(0))
    for i, t in enumerate(p.parameters().values()):
        t.data[...] = rng.child(5, i).normal(t.shape, scale=0.5)
    x = parameter(rng.child(1).normal((1, 12, 4)))
    target = rng.child(2).normal((1, 12, 4))

    def run():
        seq = TokenSequence.unmasked(x)
        if variant == "dense":
            return dense_attention(seq, cfg, p)
        return lsh_attention(seq, cfg, p, rng.child(3))

    def piece():
        with record_buckets() as d, no_grad():
            run()
        return tuple(d)

    samples = check_gradients(lambda: (run().tokens * target).sum(), dict(p.parameters(), x=x), rng.child(4),
                              per_param=6, h=1e-4, points=5, piece_fn=piece)
    return _grad_detail(samples)


# ---------------------------------------------------------------- revblocks

def check_round_trip(seed):
    detail = {}
    for depth in (12, 10, 8):
        blocks = [_rev_block(8, RngStream(seed).child(depth, i)) for i in range(depth)]
        x1, x2 = RngStream(seed).child(0).normal((1, 20, 8)), RngStream(seed).child(1).normal((1, 20, 8))
        with no_grad():
            y1, y2 = x1, x2
            for b in blocks:
                y1, y2 = rev_forward(y1, y2, b)
            for b in reversed(blocks):
                y1, y2 = rev_inverse(y1, y2, b)
        detail[f"depth_{depth}"] = float(max(np.abs(y1.data - x1).max(), np.abs(y2.data - x2).max()))
    return max(detail.values()) < 1e-8, detail


def check_chunk_invariance(seed):
    params = FeedForward(6, 24, RngStream(seed))
    x = RngStream(seed).child(1).normal((2, 11, 6))
    ref = chunked_ffn(x, ChunkedFFNConfig(24), params).data
    diffs = {c: float(np.abs(chunked_ffn(x, ChunkedFFNConfig(24, c), params).data - ref).max()) for c in (1, 2, 3, 5)}
    # BLAS kernels may differ by row-block size; allow a few ulps
    tol = 4 * np.finfo(float).eps * np.abs(ref).max()
    return max(diffs.values()) <= tol, {"max_abs_diff": diffs, "tolerance": tol}


def check_reconstruction_gradients(seed):
    detail = {}
    for variant in ("lsh", "dense"):
        blocks = [_rev_block(8, RngStream(seed).child(20, i), variant) for i in range(2)]
        x = parameter(RngStream(seed).child(1).normal((2, 10, 8)))
        w = RngStream(seed).child(2).normal((2, 10, 8))

        def loss(reconstruct):
            if reconstruct:
                y1, y2 = reversible_stack(x, x, blocks)
            else:
                y1, y2 = x, x
                for b in blocks:
                    y1, y2 = rev_forward(y1, y2, b)
            return (y1 * w).sum() + (y2 * y2).sum()

        stored, rebuilt = backward(loss(False)), backward(loss(True))
        worst = 0.0
        for p in [p for b in blocks for p in b.parameters().values()] + [x]:
            worst = max(worst, float(np.abs(stored[p] - rebuilt[p]).max() / max(np.abs(stored[p]).max(), 1e-300)))
        detail[variant] = worst
    return max(detail.values()) < 1e-6, detail


# ---------------------------------------------------------------- gradients

def check_core_gradients(seed):
    rng = RngStream(seed)
    w, g, b = parameter(rng.normal((4, 3))), parameter(rng.normal((3,))), parameter(rng.normal((3,)))
    k = parameter(rng.normal((2, 1, 3, 3)))
    x, img = rng.child(1).normal((2, 4)), rng.child(2).normal((1, 1, 5, 5))
    labels = np.array([0, 2])

    def loss():
        h = layer_norm(x @ w, g, b)
        p = softmax_rows(h.gelu(), mask=np.array([[1, 1, 0], [1, 1, 1]]))
        c = conv2d(img, k, padding=1)
        return (p * h).sum() + (c * c).mean() + cross_entropy(h, labels)

    return _grad_detail(check_gradients(loss, {"w": w, "g": g, "b": b, "k": k}, rng.child(3), per_param=6,
                                        h=1e-4, points=5))


def check_model_gradients(seed, variant):
    return _grad_detail(model_gradient_samples(variant, seed))


# ---------------------------------------------------------------- model

def check_preset_shapes(seed):
    shapes = {}
    for name, p in PRESETS.items():
        for variant in ("dense", "lsh"):
            cfg = preset_config(name, variant, embed_dim=8, heads=2, depth=1, stem_channels=2, hidden_dim=8)
            x = RngStream(seed).uniform(size=(1, 3, p["image"], p["image"]))
            shapes[f"{name}/{variant}"] = list(forward(build(cfg, seed), x).shape)
    ok = all(v == [1, PRESETS[k.split("/")[0]]["n_classes"]] for k, v in shapes.items())
    return ok, shapes


def check_dense_permutation(seed):
    m = build(_tiny_model_config("dense"), seed)
    rng = RngStream(seed)
    tokens = rng.normal((1, 16, 8))
    perm = rng.permutation(16)
    with no_grad():
        a = pool_tokens(TokenSequence.unmasked(m.encode(TokenSequence.unmasked(tokens)))).data
        b = pool_tokens(TokenSequence.unmasked(m.encode(TokenSequence.unmasked(tokens[:, perm])))).data
    err = float(np.abs(a - b).max())
    return err < 1e-12, {"max_abs_err": err}


def check_no_mutation(seed):
    ok = True
    for variant in ("dense", "lsh"):
        m = build(_tiny_model_config(variant), seed)
        before = {n: p.data.copy() for n, p in m.named_parameters()}
        backward(forward(m, RngStream(seed).uniform(size=(2, 3, 8, 8))).sum())
        ok &= all(np.array_equal(p.data, before[n]) for n, p in m.named_parameters())
    return bool(ok), {}


# ---------------------------------------------------------------- train

def check_accumulation(seed):
    detail = {}
    x = RngStream(seed).uniform(size=(32, 3, 8, 8))
    y = RngStream(seed).child(1).integers(0, 3, size=32)
    for variant in ("dense", "lsh"):
        a, b = build(_tiny_model_config(variant), seed), build(_tiny_model_config(variant), seed)
        before = {n: p.data.copy() for n, p in a.named_parameters()}
        accumulate_and_step(a, [(x[i:i + 8], y[i:i + 8]) for i in range(0, 32, 8)], OptimizerState(),
                            AccumConfig(8, 4))
        accumulate_and_step(b, [(x, y)], OptimizerState(), AccumConfig(32, 1))
        detail[variant] = float(max(np.abs((pa.data - before[n]) - (pb.data - before[n])).max()
                                    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())))
    return max(detail.values()) < 1e-10, detail


def check_lr_schedule(seed):
    s = Schedule(1e-3, 5, 50, 1e-6)
    grid = np.linspace(0, 50, 5001)
    lrs = np.array([lr_at(e, s) for e in grid])
    after = lrs[grid >= 5]
    ok = np.all(np.diff(after) <= 1e-18) and np.abs(np.diff(lrs)).max() < 1e-5
    ok &= lr_at(5, s) == 1e-3 and abs(lr_at(50, s) - 1e-6) < 1e-18
    return bool(ok), {"max_step": float(np.abs(np.diff(lrs)).max())}


def check_evaluate_order(seed):
    m = build(_tiny_model_config("dense", n_classes=2), seed)
    ds = synth_twoclass(24, 8, 1.0, RngStream(seed))
    a = evaluate(m, ds, batch_size=7)
    b = evaluate(m, ds.subset(RngStream(seed).child(1).permutation(24)), batch_size=5)
    return bool(np.array_equal(a.confusion, b.confusion)), {"accuracy": a.accuracy}


def check_uniform_cross_entropy(seed):
    vals = {k: float(cross_entropy(np.zeros((4, k)), np.arange(4) % k).data) for k in (2, 5, 10, 100)}
    return all(v == float(np.log(k)) for k, v in vals.items()), vals


# ---------------------------------------------------------------- data

def check_ingestion_determinism(seed):
    import tempfile
    from pathlib import Path

    from .data import read_cifar_file, write_cifar_file

    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "b.bin"
        write_cifar_file(p, rng.integers(0, 256, size=(5, 3072)), [1, 2, 3, 4, 9])
        a, b = read_cifar_file(p), read_cifar_file(p)
    return a[0].tobytes() == b[0].tobytes() and a[1].tolist() == [1, 2, 3, 4, 9], {}


def check_augment_preserves(seed):
    x = RngStream(seed).uniform(size=(6, 3, 8, 8))
    y = augment(x, AugmentPolicy(0.5, 2), RngStream(seed).child(1))
    return y.shape == x.shape, {}


def check_subset_balance(seed):
    from .data import balanced_subset

    labels = RngStream(seed).integers(0, 10, size=500)
    keep = balanced_subset(labels, 5, 10)
    return np.bincount(labels[keep], minlength=10).tolist() == [5] * 10, {}


# ---------------------------------------------------------------- bench

def check_count_exponents(seed):
    cfg = AttentionConfig(heads=1, model_dim=64, bucket_size=16, n_rounds=2, lookback=1)
    recs = sweep_attention([256, 512, 1024, 2048, 4096, 8192], cfg, time_it=False, rng=RngStream(seed))
    dense = fit_scaling([r for r in recs if r.variant == "dense"]).exponent
    lsh = fit_scaling([r for r in recs if r.variant == "lsh"]).exponent
    return dense == 2.0 and lsh <= 1.05, {"dense_exponent": dense, "lsh_exponent": lsh}


def check_identical_inputs(seed):
    a = sweep_inputs(256, 16, RngStream(seed))
    b = sweep_inputs(256, 16, RngStream(seed))
    return a.tobytes() == b.tobytes(), {}


# ---------------------------------------------------------------- registry

CHECKS = {
    "core": [
        ("core.softmax_rows_sum_to_one", check_softmax_rows),
        ("core.sort_round_trip", check_sort_round_trip),
        ("core.determinism", check_determinism),
    ],
    "tokenizer": [
        ("tokenizer.patch_locality", check_patch_locality),
        ("tokenizer.stem_preserves_token_count", check_stem_preserves_count),
        ("tokenizer.matched_tokenization", check_matched_tokens),
    ],
    "attention": [
        ("attention.degeneracy", check_degeneracy),
        ("attention.monotonicity", check_monotonicity),
        ("attention.counter_exactness", check_counter_exactness),
        ("attention.permutation_safety", check_permutation_safety),
        ("attention.masking", check_masking),
        ("attention.gradients_dense", lambda s: check_attention_gradients(s, "dense")),
        ("attention.gradients_lsh", lambda s: check_attention_gradients(s, "lsh")),
    ],
    "revblocks": [
        ("revblocks.round_trip", check_round_trip),
        ("revblocks.chunked_ffn_invariance", check_chunk_invariance),
        ("revblocks.reconstruction_gradients", check_reconstruction_gradients),
    ],
    "gradients": [
        ("gradients.core_ops", check_core_gradients),
        ("attention.gradients_dense", lambda s: check_attention_gradients(s, "dense")),
        ("attention.gradients_lsh", lambda s: check_attention_gradients(s, "lsh")),
        ("gradients.model_dense", lambda s: check_model_gradients(s, "dense")),
        ("gradients.model_lsh", lambda s: check_model_gradients(s, "lsh")),
    ],
    "model": [
        ("model.preset_shapes", check_preset_shapes),
        ("model.dense_permutation_invariance", check_dense_permutation),
        ("model.forward_does_not_mutate", check_no_mutation),
    ],
    "train": [
        ("train.accumulation_equivalence", check_accumulation),
        ("train.lr_schedule", check_lr_schedule),
        ("train.evaluate_order_independent", check_evaluate_order),
        ("train.uniform_cross_entropy", check_uniform_cross_entropy),
    ],
    "data": [
        ("data.ingestion_determinism", check_ingestion_determinism),
        ("data.augment_preserves_shape", check_augment_preserves),
        ("data.subset_balance", check_subset_balance),
    ],
    "bench": [
        ("bench.count_exponents", check_count_exponents),
        ("bench.identical_inputs", check_identical_inputs),
    ],
}


def checks_for(scope: str) -> list:
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    scopes = [s for s in SCOPES if s != "all"] if scope == "all" else [scope]
    seen, out = set(), []
    for s in scopes:
        for name, fn in CHECKS[s]:
            if name not in seen:
                seen.add(name)
                out.append((name, fn))
    return out


def run_verify(scope: str = "all", seed: int = 0, progress=None) -> VerifyReport:
    results = []
    for name, fn in checks_for(scope):
        t0 = time.perf_counter()
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing check is a failed invariant, not a crashed run
            ok, detail = False, {"error": f"{type(exc).__name__}: {exc}"}
        res = CheckResult(name, bool(ok), time.perf_counter() - t0, _plain(detail))
        results.append(res)
        if progress is not None:
            progress(res)
    return VerifyReport(scope, seed, __version__, all(r.passed for r in results), results)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


__all__ = ["CHECKS", "SCOPES", "VerifyReport", "checks_for", "model_gradient_samples", "run_verify"]
