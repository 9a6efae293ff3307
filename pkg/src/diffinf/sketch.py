"""Gradient compression: pad, permute, sign-flip, group-add.

A sketch context maps a length-L vector to ``v`` float32 values in four
steps: zero-pad to the smallest multiple of ``v`` at least L, gather through
a random permutation, multiply elementwise by random +-1 signs, then sum
``v`` contiguous groups of ``padded_len / v`` elements each.  The map is
linear, preserves inner products in expectation, and is fully determined
by ``(param_count, target_dim, seed)`` via the stream contract in
:mod:`diffinf.rng`, so a context never needs to be stored alongside more
than those three integers plus its two derived arrays.

Group orientation: output ``j`` covers positions ``[j*g, (j+1)*g)`` of the
permuted, signed vector, with ``g = padded_len // target_dim``; i.e. the
padded vector reshaped to ``(v, g)`` and summed along rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from . import rng

_PERM_SUBSTREAM = 1
_SIGN_SUBSTREAM = 2


@dataclass(frozen=True)
class SketchConfig:
    """Dimensions and seed that fully determine a sketch context."""

    param_count: int
    target_dim: int
    seed: int
    padded_len: int

    @classmethod
    def create(cls, param_count: int, target_dim: int, seed: int) -> "SketchConfig":
        if param_count < 1:
            raise ConfigError("param_count must be >= 1")
        if target_dim < 1:
            raise ConfigError("target_dim must be >= 1")
        padded_len = ((param_count + target_dim - 1) // target_dim) * target_dim
        if padded_len >= 1 << 32:
            raise ConfigError(
                "padded length exceeds 32-bit permutation index range"
            )
        return cls(param_count, target_dim, seed & ((1 << 64) - 1), padded_len)

    @property
    def group_size(self) -> int:
        return self.padded_len // self.target_dim

    def sign_bytes(self) -> int:
        """Packed size of the sign vector, one bit per padded element."""
        return (self.padded_len + 7) // 8

    def perm_bytes(self) -> int:
        """Packed size of the permutation, 4 bytes per padded element."""
        return 4 * self.padded_len


class SketchContext:
    """Immutable compression transform: permutation + packed sign bits.

    Derive with :func:`derive_context`; construct directly only for tests
    or when loading a stored context.
    """

    def __init__(self, config: SketchConfig, perm: np.ndarray, sign_words: np.ndarray):
        perm = np.ascontiguousarray(perm, dtype=np.uint32)
        if perm.shape != (config.padded_len,):
            raise DimensionError("permutation length must equal padded_len")
        expected_words = (config.padded_len + 63) // 64
        sign_words = np.ascontiguousarray(sign_words, dtype=np.uint64)
        if sign_words.shape != (expected_words,):
            raise DimensionError("sign words length mismatch")
        self.config = config
        self.perm = perm
        self.sign_words = sign_words
        self._signs = rng.unpack_signs(sign_words, config.padded_len)
        self.perm.setflags(write=False)
        self.sign_words.setflags(write=False)
        self._signs.setflags(write=False)

    @property
    def signs(self) -> np.ndarray:
        """Sign vector expanded to float32 +1/-1 values."""
        return self._signs

    @classmethod
    def from_signs(
        cls, config: SketchConfig, perm: np.ndarray, signs: np.ndarray
    ) -> "SketchContext":
        """Build from an explicit +-1 vector (test/interop convenience)."""
        signs = np.asarray(signs)
        if signs.shape != (config.padded_len,):
            raise DimensionError("sign vector length must equal padded_len")
        bits = (signs > 0).astype(np.uint8)
        packed = np.packbits(bits, bitorder="little")
        n_words = (config.padded_len + 63) // 64
        padded = np.zeros(n_words * 8, dtype=np.uint8)
        padded[: len(packed)] = packed
        return cls(config, perm, padded.view("<u8").astype(np.uint64))


def derive_context(param_count: int, target_dim: int, seed: int) -> SketchContext:
    """Derive the deterministic context for ``(param_count, target_dim, seed)``.

    The master seed spawns two sub-streams: #1 drives the Fisher-Yates
    permutation, #2 supplies one sign bit per padded element.
    """
    config = SketchConfig.create(param_count, target_dim, seed)
    perm_seed = rng.substream_seed(config.seed, _PERM_SUBSTREAM)
    sign_seed = rng.substream_seed(config.seed, _SIGN_SUBSTREAM)
    perm = rng.random_permutation(perm_seed, config.padded_len)
    words = rng.sign_words(sign_seed, config.padded_len)
    return SketchContext(config, perm, words)


def compress(ctx: SketchContext, g: np.ndarray) -> np.ndarray:
    """Compress a flat vector (or a batch of rows) to ``target_dim`` floats.

    ``output[j] = sum_{i in group j} signs[i] * padded[perm[i]]`` with groups
    laid out contiguously.  Group sums accumulate in float64 and are stored
    as float32, the cache dtype.
    """
    cfg = ctx.config
    g = np.asarray(g, dtype=np.float32)
    single = g.ndim == 1
    if single:
        g = g[np.newaxis, :]
    if g.ndim != 2 or g.shape[1] != cfg.param_count:
        raise DimensionError(
            f"expected vectors of length {cfg.param_count}, got shape {g.shape}"
        )
    padded = np.zeros((g.shape[0], cfg.padded_len), dtype=np.float32)
    padded[:, : cfg.param_count] = g
    y = padded[:, ctx.perm]
    y *= ctx.signs
    out = (
        y.astype(np.float64)
        .reshape(g.shape[0], cfg.target_dim, cfg.group_size)
        .sum(axis=2)
        .astype(np.float32)
    )
    return out[0] if single else out


def sketch_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two compressed vectors, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))
