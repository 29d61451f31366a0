"""Image -> token sequence: convolutional stem, patch projection, positions.

Patches are read in row-major grid order and each P x P x C block is
flattened channel-major (C, P, P) before the linear projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Module, RngStream, Tensor, as_tensor, conv2d, linear, parameter
from .core.module import Linear
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class PatchConfig:
    image_height: int
    image_width: int
    patch_size: int
    embed_dim: int
    in_channels: int = 3
    stem_channels: int = 32
    stem_kernel: int = 3

    def __post_init__(self):
        if self.patch_size < 1 or self.embed_dim < 1:
            raise ConfigError("patch_size and embed_dim must be >= 1")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image "
                f"{self.image_height}x{self.image_width}"
            )
        if self.stem_kernel % 2 == 0:
            raise ConfigError("stem_kernel must be odd to preserve spatial size")

    @property
    def n_tokens(self) -> int:
        return token_count(self.image_height, self.image_width, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.stem_channels * self.patch_size**2


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, n, D]
    mask: np.ndarray  # [B, n] of {0, 1}

    def __post_init__(self):
        self.tokens = as_tensor(self.tokens)
        self.mask = np.asarray(self.mask)
        if self.mask.shape != self.tokens.shape[:2]:
            raise DimensionError(f"mask {self.mask.shape} does not match tokens {self.tokens.shape}")

    @property
    def n(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def unmasked(cls, tokens) -> "TokenSequence":
        tokens = as_tensor(tokens)
        return cls(tokens, np.ones(tokens.shape[:2], dtype=np.int8))


def token_count(H: int, W: int, P: int) -> int:
    """Number of non-overlapping P x P patches in an H x W image."""
    if P < 1 or H % P or W % P:
        raise ConfigError(f"patch size {P} must divide {H}x{W}")
    return (H // P) * (W // P)


class ConvStem(Module):
    """Two stride-1, same-padded convolutions with a GELU in between."""

    def __init__(self, cfg: PatchConfig, rng: RngStream, activation: str = "gelu", dtype=np.float64):
        k, c_in, c = cfg.stem_kernel, cfg.in_channels, cfg.stem_channels
        self.conv1_weight = parameter(rng.child(0).truncated_normal((c, c_in, k, k), dtype=dtype))
        self.conv1_bias = parameter(np.zeros(c, dtype=dtype))
        self.conv2_weight = parameter(rng.child(1).truncated_normal((c, c, k, k), dtype=dtype))
        self.conv2_bias = parameter(np.zeros(c, dtype=dtype))
        if activation not in ("gelu", "identity"):
            raise ConfigError(f"unknown stem activation {activation!r}")
        self.activation = activation
        self.padding = k // 2


def conv_stem(images, cfg: PatchConfig, stem: ConvStem) -> Tensor:
    images = as_tensor(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_height, cfg.image_width):
        raise ConfigError(
            f"expected images [B,{cfg.in_channels},{cfg.image_height},{cfg.image_width}], got {images.shape}"
        )
    h = conv2d(images, stem.conv1_weight, stem.conv1_bias, stride=1, padding=stem.padding)
    if stem.activation == "gelu":
        h = h.gelu()
    return conv2d(h, stem.conv2_weight, stem.conv2_bias, stride=1, padding=stem.padding)


def _patch_rows(features: Tensor, P: int) -> Tensor:
    B, C, H, W = features.shape
    if H % P or W % P:
        raise ConfigError(f"patch size {P} must divide {H}x{W}")
    gh, gw = H // P, W // P
    x = features.reshape(B, C, gh, P, gw, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * P * P)


def patchify_project(features, cfg: PatchConfig, projection: Linear) -> TokenSequence:
    """Flatten each P x P block (row-major grid order) and project it to D channels."""
    features = as_tensor(features)
    rows = _patch_rows(features, cfg.patch_size)
    tokens = linear(rows, projection.weight, projection.bias)
    return TokenSequence.unmasked(tokens)


class PositionalEncoding(Module):
    """Learned absolute position table, one row per token position."""

    kind = "learned"

    def __init__(self, n_max: int, dim: int, rng: RngStream, dtype=np.float64):
        self.table = parameter(rng.truncated_normal((n_max, dim), dtype=dtype))

    @property
    def n_max(self) -> int:
        return self.table.shape[0]


def add_positions(seq: TokenSequence, enc: PositionalEncoding) -> TokenSequence:
    n = seq.n
    if n > enc.n_max:
        raise ConfigError(f"sequence of {n} tokens exceeds position table of {enc.n_max}")
    table = enc.table if n == enc.n_max else enc.table[:n]
    return TokenSequence(seq.tokens + table, seq.mask)


class Tokenizer(Module):
    """Stem + patch projection + positions, shared verbatim by both model variants."""

    def __init__(self, cfg: PatchConfig, rng: RngStream, dtype=np.float64):
        self.cfg = cfg
        self.stem = ConvStem(cfg, rng.child(0), dtype=dtype)
        self.projection = Linear(cfg.patch_dim, cfg.embed_dim, rng.child(1), dtype=dtype)
        self.positions = PositionalEncoding(cfg.n_tokens, cfg.embed_dim, rng.child(2), dtype=dtype)

    def __call__(self, images) -> TokenSequence:
        features = conv_stem(images, self.cfg, self.stem)
        return add_positions(patchify_project(features, self.cfg, self.projection), self.positions)
