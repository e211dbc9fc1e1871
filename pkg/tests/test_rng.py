import math

import numpy as np
import pytest

from amber.rng import SplitMix64

# First three outputs for seed 0, from the published splitmix64 reference
# sequence (state starts at 0, output i uses state = i * golden gamma).
_SEED0_FIRST3 = [
    0xE220A8397B1DCDAF,
    0x6E789E6AA1B965F4,
    0x06C45D188009454F,
]


def test_known_sequence_seed_zero():
    rng = SplitMix64(0)
    assert [rng.next_u64() for _ in range(3)] == _SEED0_FIRST3


def test_determinism_across_instances():
    a = SplitMix64(12345)
    b = SplitMix64(12345)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]


def test_different_seeds_differ():
    assert SplitMix64(1).next_u64() != SplitMix64(2).next_u64()


def test_seed_wraps_to_64_bits():
    assert SplitMix64(1 << 64).next_u64() == SplitMix64(0).next_u64()


def test_random_in_unit_interval():
    rng = SplitMix64(7)
    vals = [rng.random() for _ in range(1000)]
    assert all(0.0 <= v < 1.0 for v in vals)
    assert abs(np.mean(vals) - 0.5) < 0.05


def test_uniform_scales_range():
    rng = SplitMix64(8)
    vals = [rng.uniform(-2.0, 3.0) for _ in range(1000)]
    assert all(-2.0 <= v < 3.0 for v in vals)


def test_randint_bounds_and_coverage():
    rng = SplitMix64(9)
    vals = [rng.randint(5) for _ in range(2000)]
    assert set(vals) == {0, 1, 2, 3, 4}


def test_randint_rejects_nonpositive():
    with pytest.raises(ValueError):
        SplitMix64(0).randint(0)


def test_normal_moments():
    rng = SplitMix64(10)
    vals = np.array([rng.normal() for _ in range(20000)])
    assert abs(vals.mean()) < 0.03
    assert abs(vals.std() - 1.0) < 0.03


def test_shuffle_is_permutation_and_deterministic():
    items = list(range(50))
    a = items.copy()
    SplitMix64(11).shuffle(a)
    b = items.copy()
    SplitMix64(11).shuffle(b)
    assert a == b
    assert sorted(a) == items
    assert a != items  # astronomically unlikely to be identity


def test_choose_distinct_and_within_range():
    rng = SplitMix64(12)
    picked = rng.choose(100, 30)
    assert len(picked) == 30
    assert len(set(picked)) == 30
    assert all(0 <= i < 100 for i in picked)


def test_choose_rejects_oversample():
    with pytest.raises(ValueError):
        SplitMix64(0).choose(3, 4)


def test_choose_is_uniform_over_small_space():
    # All 3 single-element choices from range(3) appear with ~equal frequency.
    counts = {0: 0, 1: 0, 2: 0}
    for seed in range(3000):
        counts[SplitMix64(seed).choose(3, 1)[0]] += 1
    for c in counts.values():
        assert abs(c - 1000) < 120


def test_block_generation_matches_scalar_draws():
    a = SplitMix64(2024)
    block = a._next_u64_block(257)
    b = SplitMix64(2024)
    scalar = [b.next_u64() for _ in range(257)]
    assert block.tolist() == scalar
    assert a.next_u64() == b.next_u64()  # states advanced identically


def test_uniform_array_elementwise_equals_scalar_uniform():
    a = SplitMix64(99)
    arr = a.uniform_array((4, 5), -1.5, 2.5)
    b = SplitMix64(99)
    expected = np.array([b.uniform(-1.5, 2.5) for _ in range(20)]).reshape(4, 5)
    assert np.array_equal(arr, expected)


def test_normal_array_moments_and_determinism():
    a = SplitMix64(42)
    arr = a.normal_array((200, 100), mean=3.0, sigma=0.5)
    assert arr.shape == (200, 100)
    assert abs(arr.mean() - 3.0) < 0.01
    assert abs(arr.std() - 0.5) < 0.01
    assert np.array_equal(arr, SplitMix64(42).normal_array((200, 100), 3.0, 0.5))


def test_normal_array_consumes_two_uniforms_per_element():
    # Box-Muller cosine branch: element i uses uniforms (i, n + i).
    n = 6
    a = SplitMix64(77)
    arr = a.normal_array((n,))
    b = SplitMix64(77)
    u1 = np.array([b.random() for _ in range(n)])
    u2 = np.array([b.random() for _ in range(n)])
    expected = np.sqrt(-2.0 * np.log(np.maximum(u1, 1e-300))) * np.cos(2 * math.pi * u2)
    assert np.allclose(arr, expected, atol=1e-15)
    assert a.next_u64() == b.next_u64()
