"""Capacity-matched classifiers: dense-attention ViT and LSH Vision Reformer.

Both variants share the tokenizer (stem, patch projection, positions),
the FFN width, the final norm, token-average pooling and the linear head.
They differ only in the encoder stack:

* ``dense``: standard pre-norm residual blocks with full attention;
* ``lsh``: reversible blocks (F = LSH attention, G = chunked FFN) over a
  duplicated embedding, averaged back to one stream at the exit.

The LSH variant has ``D*D`` fewer parameters per layer because queries and
keys share a projection.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, ScoreCounter
from .core import Module, RngStream, Tensor, as_tensor, linear, param_count
from .core.module import LayerNorm, Linear
from .errors import ConfigError, DegenerateRowError
from .revblocks import (
    AttentionSublayer,
    ChunkedFFNConfig,
    FeedForwardSublayer,
    ReversibleBlock,
    rev_forward,
    reversible_stack,
)
from .tokenizer import PatchConfig, TokenSequence, Tokenizer

VARIANTS = ("dense", "lsh")

DEFAULT_DIM = 384
DEFAULT_HEADS = 6


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    depth: int
    patch: PatchConfig
    attn: AttentionConfig
    ffn: ChunkedFFNConfig
    n_classes: int
    preset: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1 or self.n_classes < 1:
            raise ConfigError("depth and n_classes must be >= 1")
        if self.attn.model_dim != self.patch.embed_dim:
            raise ConfigError("attention model_dim must equal the patch embed_dim")
        if self.attn.shared_qk != (self.variant == "lsh"):
            object.__setattr__(self, "attn", dataclasses.replace(self.attn, shared_qk=self.variant == "lsh"))

    @property
    def n_tokens(self) -> int:
        return self.patch.n_tokens

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            variant=d["variant"],
            depth=d["depth"],
            patch=PatchConfig(**d["patch"]),
            attn=AttentionConfig(**d["attn"]),
            ffn=ChunkedFFNConfig(**d["ffn"]),
            n_classes=d["n_classes"],
            preset=d.get("preset"),
        )


# image side, patch size, depth, classes
PRESETS = {
    "cifar10": dict(image=32, patch=2, depth=12, n_classes=10, bucket_size=16),
    "imagenet100": dict(image=224, patch=14, depth=10, n_classes=100, bucket_size=16),
    "retinopathy": dict(image=560, patch=20, depth=8, n_classes=5, bucket_size=16),
}


def preset_config(name: str, variant: str, *, embed_dim: int = DEFAULT_DIM, heads: int = DEFAULT_HEADS,
                  hidden_dim: int | None = None, depth: int | None = None, bucket_size: int | None = None,
                  n_rounds: int = 2, lookback: int = 1, chunk_len: int | None = 64, stem_channels: int = 32,
                  patch_size: int | None = None, image_size: int | None = None,
                  n_classes: int | None = None) -> ModelConfig:
    """Model config for a named preset; keyword overrides change one field each."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    p = PRESETS[name]
    image = image_size or p["image"]
    patch = PatchConfig(image, image, patch_size or p["patch"], embed_dim, in_channels=3,
                        stem_channels=stem_channels)
    attn = AttentionConfig(heads, embed_dim, bucket_size=bucket_size or p["bucket_size"], n_rounds=n_rounds,
                           lookback=lookback, shared_qk=variant == "lsh")
    ffn = ChunkedFFNConfig(hidden_dim or 4 * embed_dim, chunk_len if variant == "lsh" else None)
    return ModelConfig(variant, depth or p["depth"], patch, attn, ffn, n_classes or p["n_classes"], preset=name)


class DenseBlock(Module):
    """Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: ModelConfig, rng: RngStream, dtype=np.float64):
        self.attention = AttentionSublayer(cfg.attn, "dense", rng.child(0), dtype=dtype)
        self.feedforward = FeedForwardSublayer(cfg.patch.embed_dim, cfg.ffn, rng.child(1), dtype=dtype)

    def __call__(self, x: Tensor, mask, counter=None) -> Tensor:
        x = x + self.attention(x, mask, counter)
        return x + self.feedforward(x, mask)


class VisionModel(Module):
    def __init__(self, config: ModelConfig, master_seed: int, dtype=np.float64):
        self.config = config
        self.master_seed = int(master_seed)
        rng = RngStream(master_seed)
        D = config.patch.embed_dim
        # stream layout is variant independent, so both variants share tokenizer and head weights
        self.tokenizer = Tokenizer(config.patch, rng.child(0), dtype=dtype)
        blocks = []
        for layer in range(config.depth):
            lrng = rng.child(1, layer)
            if config.variant == "dense":
                blocks.append(DenseBlock(config, lrng, dtype=dtype))
            else:
                f = AttentionSublayer(config.attn, "lsh", lrng.child(0), hash_rng=rng.child(3, layer), dtype=dtype)
                g = FeedForwardSublayer(D, config.ffn, lrng.child(1), dtype=dtype)
                blocks.append(ReversibleBlock(f, g))
        self.blocks = blocks
        self.final_norm = LayerNorm(D, dtype=dtype)
        self.head = Linear(D, config.n_classes, rng.child(2), dtype=dtype)

    def encode(self, seq: TokenSequence, counter: ScoreCounter | None = None, reversible_backprop: bool = True) -> Tensor:
        x, mask = seq.tokens, seq.mask
        if self.config.variant == "dense":
            for block in self.blocks:
                x = block(x, mask, counter)
            return x
        if reversible_backprop:
            y1, y2 = reversible_stack(x, x, self.blocks, mask, counter)
        else:
            y1, y2 = x, x
            for block in self.blocks:
                y1, y2 = rev_forward(y1, y2, block, mask, counter)
        return (y1 + y2) * 0.5


def build(config: ModelConfig, rng: RngStream | int, dtype=np.float64) -> VisionModel:
    """Deterministic initialisation: truncated-normal weights (std 0.02), zero biases."""
    seed = rng.seed if isinstance(rng, RngStream) else int(rng)
    return VisionModel(config, seed, dtype=dtype)


def pool_tokens(seq: TokenSequence) -> Tensor:
    """Mean over unmasked tokens of each item."""
    mask = np.asarray(seq.mask, dtype=seq.tokens.dtype)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateRowError("an item has no unmasked token to pool")
    summed = (seq.tokens * mask[:, :, None]).sum(axis=1)
    return summed * (1.0 / counts)[:, None]


def forward(model: VisionModel, images, counter: ScoreCounter | None = None,
            reversible_backprop: bool = True) -> Tensor:
    """stem -> patches -> positions -> blocks -> final norm -> masked mean pool -> head."""
    cfg = model.config
    images = as_tensor(images)
    expected = (cfg.patch.in_channels, cfg.patch.image_height, cfg.patch.image_width)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"expected images [B,{','.join(map(str, expected))}], got {images.shape}")
    seq = model.tokenizer(images)
    x = model.encode(seq, counter, reversible_backprop)
    x = model.final_norm(x)
    pooled = pool_tokens(TokenSequence(x, seq.mask))
    return linear(pooled, model.head.weight, model.head.bias)


def analytic_param_count(config: ModelConfig) -> int:
    """Parameter count from the config alone (no weights are built)."""
    p, D, Hd = config.patch, config.patch.embed_dim, config.ffn.hidden_dim
    k, c_in, c = p.stem_kernel, p.in_channels, p.stem_channels
    stem = c * c_in * k * k + c + c * c * k * k + c
    tokenizer = stem + p.patch_dim * D + D + p.n_tokens * D
    projections = 3 if config.variant == "lsh" else 4
    block = 2 * D + projections * D * D + D + 2 * D + D * Hd + Hd + Hd * D + D
    return tokenizer + config.depth * block + 2 * D + D * config.n_classes + config.n_classes


__all__ = [
    "ModelConfig",
    "VARIANTS",
    "PRESETS",
    "VisionModel",
    "analytic_param_count",
    "build",
    "forward",
    "param_count",
    "pool_tokens",
    "preset_config",
]
