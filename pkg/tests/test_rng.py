"""The stream contract: every value here must be reproducible forever."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffinf import rng

MASK = (1 << 64) - 1


def _reference_stream(seed: int, count: int) -> list[int]:
    """Independent scalar splitmix64, straight from the published recipe."""
    out = []
    state = seed & MASK
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_stream_matches_scalar_reference():
    for seed in (0, 1, 42, 0xDEADBEEF, MASK):
        expected = _reference_stream(seed, 50)
        got = rng.stream_block(seed, 0, 50).tolist()
        assert got == expected


def test_known_first_output_for_seed_zero():
    # published splitmix64 test vector
    assert rng.stream_block(0, 0, 1)[0] == 0xE220A8397B1DCDAF


def test_stream_block_is_counter_based():
    whole = rng.stream_block(7, 0, 100)
    tail = rng.stream_block(7, 60, 40)
    assert np.array_equal(whole[60:], tail)


def test_substream_seeds_are_stream_outputs():
    assert rng.substream_seed(9, 3) == _reference_stream(9, 3)[2]
    with pytest.raises(ValueError):
        rng.substream_seed(9, 0)


def test_bounded_draws_in_range_and_deterministic():
    bounds = [5, 1, 100, 7, 2**40]
    a = rng.bounded_draws(123, bounds)
    b = rng.bounded_draws(123, bounds)
    assert a == b
    assert all(0 <= x < n for x, n in zip(a, bounds))


def test_bounded_draws_roughly_uniform():
    draws = rng.bounded_draws(5, [10] * 20000)
    counts = np.bincount(draws, minlength=10)
    assert counts.min() > 1700 and counts.max() < 2300


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 300), seed=st.integers(0, MASK))
def test_permutation_is_a_bijection(n, seed):
    perm = rng.random_permutation(seed, n)
    assert perm.dtype == np.uint32
    assert sorted(perm.tolist()) == list(range(n))


def test_permutation_deterministic_and_varied():
    a = rng.random_permutation(77, 1000)
    b = rng.random_permutation(77, 1000)
    c = rng.random_permutation(78, 1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sign_words_tail_bits_zeroed():
    words = rng.sign_words(3, 70)
    assert len(words) == 2
    assert int(words[1]) >> 6 == 0  # bits 70.. must be clear


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 500), seed=st.integers(0, MASK))
def test_sign_pack_unpack_roundtrip(n, seed):
    words = rng.sign_words(seed, n)
    packed = rng.pack_sign_bytes(words, n)
    assert len(packed) == (n + 7) // 8
    back = rng.words_from_sign_bytes(packed, n)
    assert np.array_equal(back, words)
    signs = rng.unpack_signs(words, n)
    assert signs.shape == (n,)
    assert set(np.unique(signs)) <= {-1.0, 1.0}


def test_unpack_signs_bit_convention():
    # word 0b...101 -> elements [+1, -1, +1] (LSB-first, 1 => +1)
    words = np.array([0b101], dtype=np.uint64)
    signs = rng.unpack_signs(words, 3)
    assert signs.tolist() == [1.0, -1.0, 1.0]


def test_standard_normals_deterministic():
    a = rng.standard_normals(11, 257)
    b = rng.standard_normals(11, 257)
    assert np.array_equal(a, b)
    assert a.shape == (257,)
    assert np.all(np.isfinite(a))


def test_standard_normals_moments():
    pooled = np.concatenate([rng.standard_normals(1000 + i, 500) for i in range(20)])
    assert abs(pooled.mean()) < 0.05
    assert abs(pooled.var() - 1.0) < 0.05
