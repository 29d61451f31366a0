"""Reversible residual blocks and the chunked feed-forward layer.

A block maps halves ``(x1, x2)`` to ``y1 = x1 + F(x2)``, ``y2 = x2 + G(y1)``
and can be inverted exactly, so a stack only keeps its final output pair.
:func:`reversible_stack` is a single tape node whose backward pass rebuilds
each block's inputs from its outputs while propagating gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import faults
from .attention import (
    AttentionConfig,
    DenseAttentionParams,
    LSHAttentionParams,
    ScoreCounter,
    dense_attention,
    lsh_attention,
)
from .core import Module, RngStream, Tensor, as_tensor, backward_from, concat, enable_grad, linear, no_grad
from .core.module import LayerNorm, Linear
from .errors import ConfigError, ContractError
from .tokenizer import TokenSequence


@dataclass(frozen=True)
class ChunkedFFNConfig:
    hidden_dim: int
    chunk_len: int | None = None  # None: one chunk covering the whole sequence

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.chunk_len is not None and self.chunk_len < 1:
            raise ConfigError("chunk_len must be >= 1")


class FeedForward(Module):
    def __init__(self, dim: int, hidden_dim: int, rng: RngStream, dtype=np.float64):
        self.fc1 = Linear(dim, hidden_dim, rng.child(0), dtype=dtype)
        self.fc2 = Linear(hidden_dim, dim, rng.child(1), dtype=dtype)


def _ffn(x: Tensor, params: FeedForward) -> Tensor:
    h = linear(x, params.fc1.weight, params.fc1.bias).gelu()
    return linear(h, params.fc2.weight, params.fc2.bias)


def chunked_ffn(x, cfg: ChunkedFFNConfig, params: FeedForward) -> Tensor:
    """Position-wise FFN evaluated over token slices of ``chunk_len``.

    Peak hidden activation is ``B * chunk_len * hidden_dim`` instead of
    ``B * n * hidden_dim``; the result does not depend on ``chunk_len``.
    """
    x = as_tensor(x)
    n = x.shape[1]
    step = n if cfg.chunk_len is None else cfg.chunk_len
    if step >= n:
        return _ffn(x, params)
    return concat([_ffn(x[:, s:s + step], params) for s in range(0, n, step)], axis=1)


def activation_memory_estimate(depth: int, n: int, D: int, reversible: bool) -> float:
    """Stored activation floats for a residual stack, in units of one [n, D] map.

    A standard stack keeps one activation per layer; a reversible stack keeps
    only its final output pair.
    """
    return float(2 * n * D if reversible else depth * n * D)


class AttentionSublayer(Module):
    """Pre-norm attention; the ``F`` half of a reversible block."""

    def __init__(self, cfg: AttentionConfig, variant: str, rng: RngStream, hash_rng: RngStream | None = None,
                 dtype=np.float64):
        self.cfg = cfg
        self.variant = variant
        self.norm = LayerNorm(cfg.model_dim, dtype=dtype)
        if variant == "lsh":
            self.attn = LSHAttentionParams(cfg, rng, dtype=dtype)
        elif variant == "dense":
            self.attn = DenseAttentionParams(cfg, rng, dtype=dtype)
        else:
            raise ConfigError(f"unknown attention variant {variant!r}")
        # hash_rng=None means fresh hashing every call, which cannot be replayed
        self.hash_rng = hash_rng

    @property
    def replayable(self) -> bool:
        return self.variant == "dense" or self.hash_rng is not None

    def __call__(self, x: Tensor, mask: np.ndarray, counter: ScoreCounter | None = None) -> Tensor:
        seq = TokenSequence(self.norm(x), mask)
        if self.variant == "dense":
            return dense_attention(seq, self.cfg, self.attn, counter).tokens
        rng = self.hash_rng
        if rng is None:
            rng = RngStream(int(np.random.SeedSequence().generate_state(1, np.uint64)[0]))
        return lsh_attention(seq, self.cfg, self.attn, rng, counter).tokens


class FeedForwardSublayer(Module):
    """Pre-norm chunked FFN; the ``G`` half of a reversible block."""

    replayable = True

    def __init__(self, dim: int, cfg: ChunkedFFNConfig, rng: RngStream, dtype=np.float64):
        self.cfg = cfg
        self.norm = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, cfg.hidden_dim, rng, dtype=dtype)

    def __call__(self, x: Tensor, mask=None, counter=None) -> Tensor:
        return chunked_ffn(self.norm(x), self.cfg, self.ffn)


class ReversibleBlock(Module):
    def __init__(self, f, g):
        self.f = f
        self.g = g

    @property
    def replayable(self) -> bool:
        return getattr(self.f, "replayable", True) and getattr(self.g, "replayable", True)


def split_halves(x) -> tuple:
    """Split the channel axis into two equal halves."""
    x = as_tensor(x)
    width = x.shape[-1]
    if width % 2:
        raise ConfigError(f"reversible split needs an even channel count, got {width}")
    return x[..., : width // 2], x[..., width // 2:]


def _check_halves(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"reversible halves differ in shape: {a.shape} vs {b.shape}")


def rev_forward(x1, x2, block: ReversibleBlock, mask=None, counter=None) -> tuple:
    x1, x2 = as_tensor(x1), as_tensor(x2)
    _check_halves(x1, x2)
    if mask is None:
        mask = np.ones(x1.shape[:2], dtype=np.int8)
    y1 = x1 + block.f(x2, mask, counter)
    y2 = x2 + block.g(y1, mask)
    return y1, y2


def rev_inverse(y1, y2, block: ReversibleBlock, mask=None) -> tuple:
    """Recover ``(x1, x2)`` from a block's outputs."""
    if not block.replayable:
        raise ContractError("sub-layer randomness is not seeded, so the inverse pass cannot replay it")
    y1, y2 = as_tensor(y1), as_tensor(y2)
    _check_halves(y1, y2)
    if mask is None:
        mask = np.ones(y1.shape[:2], dtype=np.int8)
    x2 = y2 - block.g(y1, mask)
    x1 = y1 - block.f(x2, mask)
    if faults.active("rev_inverse"):
        x1 = x1 + 1e-3
    return x1, x2


def reversible_stack(x1, x2, blocks: list, mask=None, counter: ScoreCounter | None = None) -> tuple:
    """Run ``blocks`` as one tape node that stores only the final output pair.

    The backward pass walks the blocks in reverse: it reconstructs each
    block's inputs with :func:`rev_inverse` arithmetic and re-runs ``F`` and
    ``G`` locally to obtain input and parameter gradients.
    """
    x1, x2 = as_tensor(x1), as_tensor(x2)
    _check_halves(x1, x2)
    if mask is None:
        mask = np.ones(x1.shape[:2], dtype=np.int8)
    for b in blocks:
        if not b.replayable:
            raise ContractError("reversible stack needs replayable sub-layers")
    with no_grad():
        y1, y2 = x1, x2
        for b in blocks:
            y1, y2 = rev_forward(y1, y2, b, mask, counter)
    params = [p for b in blocks for p in b.parameters().values()]
    slots = {id(p): i for i, p in enumerate(params)}
    final1, final2 = y1.data, y2.data

    def back(g):
        with enable_grad():
            return _reverse_pass(g)

    def _reverse_pass(g):
        gy1, gy2 = g[0], g[1]
        a1, a2 = final1, final2
        pgrads = [None] * len(params)

        def collect(local):
            for leaf, lg in local.items():
                i = slots.get(id(leaf))
                if i is not None:
                    pgrads[i] = lg if pgrads[i] is None else pgrads[i] + lg

        for b in reversed(blocks):
            y1_leaf = Tensor(a1, requires_grad=True)
            g_out = b.g(y1_leaf, mask)
            local = backward_from(g_out, gy2, accumulate=False)
            collect(local)
            x2 = a2 - g_out.data
            gx1 = gy1 + local.get(y1_leaf, 0.0)

            x2_leaf = Tensor(x2, requires_grad=True)
            f_out = b.f(x2_leaf, mask)
            local = backward_from(f_out, gx1, accumulate=False)
            collect(local)
            x1 = a1 - f_out.data
            gx2 = gy2 + local.get(x2_leaf, 0.0)

            a1, a2, gy1, gy2 = x1, x2, gx1, gx2
        return (gy1, gy2, *pgrads)

    stacked = Tensor._make(np.stack([final1, final2]), (x1, x2, *params), back)
    return stacked[0], stacked[1]
