"""Deterministic, platform-portable random primitives.

Every random artifact that ends up inside a cache (permutation, sign bits,
per-timestep noise) must be reproducible bit-for-bit from integer seeds,
on any platform, in any implementation language.  To guarantee that, this
module pins the exact algorithms instead of delegating to a library RNG:

* stream generator: splitmix64.  The k-th output (k >= 1) of the stream
  seeded with ``s`` is ``mix64((s + k * GAMMA) mod 2**64)``, which makes the
  stream counter-based and therefore vectorizable.
* sub-streams: the k-th output of a parent stream is used as the seed of
  child stream k (``substream_seed``).
* bounded integers: 64-bit draws filtered by modulo rejection, so a uniform
  value in ``[0, n)`` is exact, not approximately uniform.
* permutations: Fisher-Yates driven by the bounded-integer sampler.
* sign bits: one bit per element, consumed LSB-first from consecutive
  64-bit stream words.
* Gaussians: Box-Muller on 53-bit uniforms.

Changing any of these invalidates previously written caches.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64_GAMMA = np.uint64(_GAMMA)
_U64_MIX1 = np.uint64(_MIX1)
_U64_MIX2 = np.uint64(_MIX2)


def mix64(x: int) -> int:
    """splitmix64 finalizer on a single 64-bit value."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def stream_block(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start+1 .. start+count`` of the splitmix64 stream, as uint64.

    Output k of the stream seeded with ``seed`` is mix64(seed + k*GAMMA);
    the counter form lets us produce any block without stepping through
    predecessors.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    ks = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + ks * _U64_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX1
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX2
    return z ^ (z >> np.uint64(31))


def substream_seed(seed: int, k: int) -> int:
    """Seed of child stream ``k`` (k >= 1) of the stream seeded with ``seed``."""
    if k < 1:
        raise ValueError("substream index must be >= 1")
    return mix64((seed + k * _GAMMA) & _MASK64)


def bounded_draws(seed: int, bounds: list[int]) -> list[int]:
    """One uniform integer in ``[0, bound)`` per entry of ``bounds``.

    Draws 64-bit words from the stream in order and applies modulo
    rejection: a draw r is rejected while r >= 2**64 - (2**64 % bound).
    Rejected draws consume stream positions, so the consumption pattern is
    part of the contract.
    """
    out: list[int] = []
    pos = 0
    buf: list[int] = []
    bi = 0
    for n in bounds:
        if n <= 0:
            raise ValueError("bounds must be positive")
        threshold = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            if bi >= len(buf):
                block = max(256, len(bounds) - len(out))
                buf = stream_block(seed, pos, block).tolist()
                pos += block
                bi = 0
            r = buf[bi]
            bi += 1
            if r < threshold:
                out.append(r % n)
                break
    return out


def random_permutation(seed: int, n: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` as uint32.

    Swap i (``i = n-1 .. 1``) uses a bounded draw in ``[0, i+1)``; the draws
    come from the stream via :func:`bounded_draws`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= 1 << 32:
        raise ValueError("permutations are limited to 32-bit index range")
    js = bounded_draws(seed, list(range(n, 1, -1)))
    perm = list(range(n))
    i = n - 1
    for j in js:
        perm[i], perm[j] = perm[j], perm[i]
        i -= 1
    return np.asarray(perm, dtype=np.uint32)


def sign_words(seed: int, n_bits: int) -> np.ndarray:
    """``ceil(n_bits/64)`` stream words holding one sign bit per element.

    Element i maps to bit ``i % 64`` (LSB-first) of word ``i // 64``; bit 1
    means +1, bit 0 means -1.  Bits above ``n_bits`` in the last word are
    forced to zero so the packed form is unique.
    """
    if n_bits < 1:
        raise ValueError("n_bits must be >= 1")
    n_words = (n_bits + 63) // 64
    words = stream_block(seed, 0, n_words).copy()
    tail = n_bits % 64
    if tail:
        words[-1] &= np.uint64((1 << tail) - 1)
    return words


def unpack_signs(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Expand packed sign words into a float32 vector of +1/-1 values."""
    as_bytes = words.astype("<u8").view(np.uint8)
    bits = np.unpackbits(as_bytes, bitorder="little")[:n_bits]
    return (bits.astype(np.float32) * 2.0 - 1.0).astype(np.float32)


def pack_sign_bytes(words: np.ndarray, n_bits: int) -> bytes:
    """Packed LSB-first sign bytes, ``ceil(n_bits/8)`` long."""
    n_bytes = (n_bits + 7) // 8
    return words.astype("<u8").tobytes()[:n_bytes]


def words_from_sign_bytes(raw: bytes, n_bits: int) -> np.ndarray:
    """Inverse of :func:`pack_sign_bytes`."""
    n_words = (n_bits + 63) // 64
    padded = raw + b"\x00" * (n_words * 8 - len(raw))
    return np.frombuffer(padded, dtype="<u8").astype(np.uint64)


def standard_normals(seed: int, dim: int) -> np.ndarray:
    """``dim`` standard-normal float64 values via Box-Muller.

    Pair p (p = 0, 1, ...) consumes stream words 2p+1 and 2p+2 for the two
    uniforms; u1 lies in (0, 1] so the log never sees zero.  Odd dims drop
    the final sine half of the last pair.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    n_pairs = (dim + 1) // 2
    words = stream_block(seed, 0, 2 * n_pairs)
    w1 = words[0::2]
    w2 = words[1::2]
    u1 = ((w1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (w2 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * math.pi) * u2
    out = np.empty(2 * n_pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:dim]
