"""Dense multi-head attention and LSH bucketed attention with score counters.

LSH attention, per head and per hashing round:

1. hash every key with angular LSH (argmax over ``[xR, -xR]``),
2. stable-sort tokens by bucket id and cut the sorted order into
   contiguous chunks of ``bucket_size`` tokens,
3. give each query its own chunk plus ``lookback`` preceding chunks.

Candidates are unioned over rounds (deduplicated, the query itself always
included) and one softmax runs over the union.  When the union covers the
whole sequence the result is exactly dense shared-QK attention.

Zero-mask tokens get the reserved bucket id ``n_buckets`` so they sort to
the end; they never enter a candidate set.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import faults
from .core import (
    Module,
    RngStream,
    Tensor,
    gather_rows,
    l2_normalize,
    linear,
    matmul,
    parameter,
    softmax_rows,
    stable_sort_with_permutation,
)
from .errors import ConfigError, InternalError
from .tokenizer import TokenSequence


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    model_dim: int
    bucket_size: int = 16
    n_rounds: int = 2
    lookback: int = 1
    shared_qk: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide model_dim={self.model_dim}")
        if self.bucket_size < 2:
            raise ConfigError("bucket_size must be >= 2")
        if self.n_rounds < 1:
            raise ConfigError("n_rounds must be >= 1")
        if self.lookback < 0:
            raise ConfigError("lookback must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class BucketAssignment:
    round: int
    bucket_ids: np.ndarray
    permutation: np.ndarray
    inverse: np.ndarray
    chunk_size: int

    @property
    def n_chunks(self) -> int:
        return len(self.permutation) // self.chunk_size

    def chunk(self, c: int) -> np.ndarray:
        """Original token positions in sorted chunk ``c``."""
        return self.permutation[c * self.chunk_size:(c + 1) * self.chunk_size]


@dataclass
class ScoreCounter:
    """Counts query-key score evaluations.

    Totals are summed over batch items, heads and layers; ``head_evals``
    counts (item, head, layer) evaluations so per-head averages can be
    recovered.
    """

    variant: str
    n: int = 0
    scores_evaluated: int = 0
    head_evals: int = 0

    def add(self, n: int, scores: int, head_evals: int):
        self.n = n
        self.scores_evaluated += int(scores)
        self.head_evals += int(head_evals)

    @property
    def per_head(self) -> float:
        return self.scores_evaluated / self.head_evals if self.head_evals else 0.0


class DenseAttentionParams(Module):
    """Separate Q, K, V projections (or a shared QK one) and an output projection."""

    def __init__(self, cfg: AttentionConfig, rng: RngStream, dtype=np.float64):
        D = cfg.model_dim
        if cfg.shared_qk:
            self.wqk = parameter(rng.child(0).truncated_normal((D, D), dtype=dtype))
        else:
            self.wq = parameter(rng.child(0).truncated_normal((D, D), dtype=dtype))
            self.wk = parameter(rng.child(1).truncated_normal((D, D), dtype=dtype))
        self.wv = parameter(rng.child(2).truncated_normal((D, D), dtype=dtype))
        self.wo = parameter(rng.child(3).truncated_normal((D, D), dtype=dtype))
        self.bo = parameter(np.zeros(D, dtype=dtype))


class LSHAttentionParams(Module):
    """Shared QK projection, value projection and output projection."""

    def __init__(self, cfg: AttentionConfig, rng: RngStream, dtype=np.float64):
        D = cfg.model_dim
        self.wqk = parameter(rng.child(0).truncated_normal((D, D), dtype=dtype))
        self.wv = parameter(rng.child(2).truncated_normal((D, D), dtype=dtype))
        self.wo = parameter(rng.child(3).truncated_normal((D, D), dtype=dtype))
        self.bo = parameter(np.zeros(D, dtype=dtype))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, D = x.shape
    return x.reshape(B, n, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, n, Dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, H * Dh)


def _finish(out_heads: Tensor, seq: TokenSequence, params) -> TokenSequence:
    merged = _merge_heads(out_heads) * seq.mask[:, :, None].astype(out_heads.dtype)
    return TokenSequence(linear(merged, params.wo, params.bo), seq.mask)


def _qkv(seq: TokenSequence, cfg: AttentionConfig, params):
    x = seq.tokens
    if hasattr(params, "wqk") and params.wqk is not None:
        q = _split_heads(matmul(x, params.wqk), cfg.heads)
        k = l2_normalize(q)
    else:
        q = _split_heads(matmul(x, params.wq), cfg.heads)
        k = _split_heads(matmul(x, params.wk), cfg.heads)
    v = _split_heads(matmul(x, params.wv), cfg.heads)
    return q, k, v


def dense_attention(seq: TokenSequence, cfg: AttentionConfig, params, counter: ScoreCounter | None = None) -> TokenSequence:
    """Full softmax(QK^T / sqrt(D_h)) V over all unmasked keys.

    With shared-QK parameters the keys are the L2-normalised queries, which
    makes this the exact oracle for :func:`lsh_attention`.
    """
    q, k, v = _qkv(seq, cfg, params)
    B, H, n, Dh = q.shape
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(Dh))
    weights = softmax_rows(scores, mask=seq.mask[:, None, None, :])
    if counter is not None:
        counter.add(n, B * H * n * n, B * H)
    return _finish(matmul(weights, v), seq, params)


def n_buckets_for(n_padded: int, bucket_size: int) -> int:
    """Smallest even bucket count >= n_padded / bucket_size (at least 2)."""
    nb = max(2, -(-n_padded // bucket_size))
    return nb + (nb % 2)


def lsh_hash(vectors: np.ndarray, n_buckets: int, rng: RngStream) -> np.ndarray:
    """Angular LSH: argmax over the concatenation [xR, -xR].

    ``R`` is a ``D_h x n_buckets/2`` Gaussian matrix drawn from ``rng``.
    Ties go to the lowest index.
    """
    if n_buckets < 2 or n_buckets % 2:
        raise ConfigError(f"n_buckets must be even and >= 2, got {n_buckets}")
    vectors = np.asarray(vectors)
    R = rng.normal((vectors.shape[-1], n_buckets // 2)).astype(vectors.dtype, copy=False)
    proj = vectors @ R
    return np.argmax(np.concatenate([proj, -proj], axis=-1), axis=-1)


def build_chunks(bucket_ids, bucket_size: int, round: int = 0) -> BucketAssignment:
    """Stable sort by (bucket id, position) and cut into chunks of ``bucket_size``."""
    bucket_ids = np.asarray(bucket_ids)
    if len(bucket_ids) % bucket_size:
        raise InternalError(f"{len(bucket_ids)} tokens is not a multiple of bucket_size {bucket_size}")
    _, perm, inv = stable_sort_with_permutation(bucket_ids)
    return BucketAssignment(round, bucket_ids, perm, inv, bucket_size)


def round_stream(rng: RngStream, round: int, head: int) -> RngStream:
    return rng.child(round, head)


def _candidate_index(keys: np.ndarray, mask: np.ndarray, cfg: AttentionConfig, rng: RngStream):
    """Deduplicated candidate key indices per query.

    Returns ``(index, valid)``, both ``[B, H, n, C]``; entries with
    ``valid == False`` are padding (their index is 0).  Rows of zero-mask
    queries are entirely invalid.
    """
    B, H, n, Dh = keys.shape
    bs, L = cfg.bucket_size, cfg.lookback
    n_pad = -(-n // bs) * bs
    n_chunks = n_pad // bs
    nb = n_buckets_for(n_pad, bs)
    key_ok = np.zeros((B, n_pad), dtype=bool)
    key_ok[:, :n] = mask > 0
    sentinel = n_pad

    columns = []
    for r in range(cfg.n_rounds):
        ids = np.full((B, H, n_pad), nb, dtype=np.int64)
        for h in range(H):
            ids[:, h, :n] = lsh_hash(keys[:, h].reshape(B * n, Dh), nb, round_stream(rng, r, h)).reshape(B, n)
        ids[~np.broadcast_to(key_ok[:, None, :], ids.shape)] = nb
        perm = np.argsort(ids, axis=-1, kind="stable")
        chunks = perm.reshape(B, H, n_chunks, bs)
        # window of chunk c = chunks c-L .. c; missing chunks before the first are sentinel
        parts = []
        for back in range(L, 0, -1):
            shifted = np.full_like(chunks, sentinel)
            if back < n_chunks:
                shifted[:, :, back:] = chunks[:, :, :-back]
            parts.append(shifted)
        parts.append(chunks)
        window = np.concatenate(parts, axis=-1)  # [B, H, n_chunks, (1+L)*bs]
        per_slot = np.repeat(window, bs, axis=2)  # sorted-slot order
        inv = np.empty_like(perm)
        np.put_along_axis(inv, perm, np.arange(n_pad)[None, None, :], axis=-1)
        columns.append(np.take_along_axis(per_slot, inv[..., None], axis=2)[:, :, :n])
    columns.append(np.broadcast_to(np.arange(n)[None, None, :, None], (B, H, n, 1)))
    cand = np.concatenate(columns, axis=-1)

    ok = np.zeros((B, n_pad + 1), dtype=bool)
    ok[:, :n_pad] = key_ok
    valid_key = np.take_along_axis(ok[:, None, None, :], cand.reshape(B, 1, 1, -1), axis=-1).reshape(cand.shape)
    cand = np.where(valid_key, cand, sentinel)
    cand.sort(axis=-1)
    valid = cand != sentinel
    if not faults.active("lsh_dedup"):
        valid[..., 1:] &= cand[..., 1:] != cand[..., :-1]
    valid &= (mask > 0)[:, None, :, None]
    return np.where(valid, cand, 0), valid


_log = threading.local()


@contextlib.contextmanager
def record_buckets():
    """Collect a digest of every candidate index built by :func:`lsh_attention`.

    The digests identify which smooth piece of the (piecewise smooth) LSH
    attention function a forward pass landed on.
    """
    prev = getattr(_log, "digests", None)
    _log.digests = digests = []
    try:
        yield digests
    finally:
        _log.digests = prev


def lsh_attention(seq: TokenSequence, cfg: AttentionConfig, params, rng: RngStream,
                  counter: ScoreCounter | None = None) -> TokenSequence:
    """Bucketed shared-QK attention over the multi-round candidate union."""
    q, k, v = _qkv(seq, cfg, params)
    B, H, n, Dh = q.shape
    index, valid = _candidate_index(k.data, seq.mask, cfg, rng)
    digests = getattr(_log, "digests", None)
    if digests is not None:
        digests.append(hashlib.sha1(np.where(valid, index, -1).tobytes()).hexdigest())
    query_ok = seq.mask > 0
    if not np.all(valid.any(axis=-1) == query_ok[:, None, :]):
        raise InternalError("a valid query ended up with an empty candidate set")
    if counter is not None:
        counter.add(n, int(valid.sum()), B * H)
    # zero-mask queries get a dummy single entry; their output is zeroed in _finish
    soft_mask = valid.copy()
    soft_mask[..., 0] |= ~query_ok[:, None, :]
    C = index.shape[-1]
    G = B * H
    index = index.reshape(G, n, C)
    kg = gather_rows(k.reshape(G, n, Dh), index)  # [G, n, C, Dh]
    vg = gather_rows(v.reshape(G, n, Dh), index)
    scores = matmul(q.reshape(G, n, 1, Dh), kg.swapaxes(-1, -2)) * (1.0 / math.sqrt(Dh))
    weights = softmax_rows(scores, mask=soft_mask.reshape(G, n, 1, C))
    out = matmul(weights, vg).reshape(B, H, n, Dh)
    return _finish(out, seq, params)


def candidate_sets(seq: TokenSequence, cfg: AttentionConfig, params, rng: RngStream) -> list:
    """The exact candidate sets ``lsh_attention`` uses: ``sets[b][h][i]``."""
    _, k, _ = _qkv(seq, cfg, params)
    index, valid = _candidate_index(k.data, seq.mask, cfg, rng)
    B, H, n, _ = index.shape
    return [[[frozenset(index[b, h, i][valid[b, h, i]].tolist()) for i in range(n)]
             for h in range(H)] for b in range(B)]


def score_count(seq: TokenSequence, cfg: AttentionConfig, params, rng: RngStream) -> int:
    """Deduplicated candidate pairs summed over batch and heads, without attending."""
    _, k, _ = _qkv(seq, cfg, params)
    _, valid = _candidate_index(k.data, seq.mask, cfg, rng)
    return int(valid.sum())
