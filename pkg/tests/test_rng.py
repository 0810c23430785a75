"""Keyed-stream randomness: determinism, independence, thinning."""

import numpy as np
import pytest
from scipy import stats

from interlacements import rng


def test_mix64_is_a_64_bit_permutation_sample():
    # injectivity on a large sample and full-range spread
    xs = list(range(4096)) + [2**64 - 1 - i for i in range(4096)]
    ys = {rng.mix64(x) for x in xs}
    assert len(ys) == len(xs)
    assert all(0 <= y < 2**64 for y in ys)


def test_derive_key_order_and_arity_sensitivity():
    assert rng.derive_key(7, 1, 2) != rng.derive_key(7, 2, 1)
    assert rng.derive_key(7, 1) != rng.derive_key(7, 1, 0)
    assert rng.derive_key(7, 1, 2) == rng.derive_key(7, 1, 2)


def test_uniform_at_deterministic_and_in_open_unit_interval():
    key = rng.derive_key(123, 5)
    a = rng.uniform_at(key, np.arange(10_000))
    b = rng.uniform_at(key, np.arange(10_000))
    assert np.array_equal(a, b)
    assert a.min() > 0.0 and a.max() < 1.0


def test_uniform_at_scalar_matches_vector():
    key = rng.derive_key(9, 1)
    vec = rng.uniform_at(key, np.arange(50))
    for t in (0, 3, 49):
        assert float(rng.uniform_at(key, t)) == vec[t]


def test_uniform_at_broadcasts_keys_against_counters():
    keys = rng.key_array(3, 17, np.arange(4))
    grid = rng.uniform_at(keys[:, None], np.arange(6)[None, :])
    assert grid.shape == (4, 6)
    for i in range(4):
        assert np.array_equal(grid[i], rng.uniform_at(keys[i], np.arange(6)))


def test_uniform_at_passes_ks_and_correlation_checks():
    u = rng.uniform_at(rng.derive_key(2026, 8, 19), np.arange(200_000))
    assert stats.kstest(u, "uniform").pvalue > 1e-4
    assert abs(np.corrcoef(u[:-1], u[1:])[0, 1]) < 0.01


def test_site_keys_depend_on_site_not_on_window():
    pts = np.array([[0, 0, 0], [1, -2, 3], [5, 5, 5]])
    keys = rng.site_keys(11, 3, pts)
    shuffled = rng.site_keys(11, 3, pts[::-1])
    assert np.array_equal(keys[::-1], shuffled)
    assert len(np.unique(keys)) == len(pts)


def test_poisson_counts_match_the_distribution():
    n = 50_000
    cap = 0.8
    keys = rng.key_array(5, 21, np.arange(n))
    counts, labels, owner = rng.poisson_counts_from_keys(
        keys, np.full(n, cap))
    # chi-square against Poisson(0.8) over counts 0..4, tail pooled
    kmax = 4
    obs = np.bincount(np.minimum(counts, kmax + 1), minlength=kmax + 2)
    probs = stats.poisson.pmf(np.arange(kmax + 1), cap)
    probs = np.append(probs, 1.0 - probs.sum())
    chi = ((obs - n * probs) ** 2 / (n * probs)).sum()
    assert stats.chi2.sf(chi, kmax + 1) > 1e-4
    assert counts.sum() == len(labels) == len(owner)
    # labels are the ordered arrival positions within (0, cap]
    assert labels.min() > 0 and labels.max() <= cap
    for row in np.unique(owner)[:50]:
        mine = labels[owner == row]
        assert np.all(np.diff(mine) > 0)


def test_poisson_thinning_is_a_pathwise_prefix():
    keys = rng.key_array(5, 22, np.arange(2000))
    big, lab_b, own_b = rng.poisson_counts_from_keys(keys, np.full(2000, 1.5))
    small, lab_s, own_s = rng.poisson_counts_from_keys(keys, np.full(2000, 0.5))
    assert np.all(small <= big)
    # every small-cap point appears among the big-cap points
    pts_big = {(int(o), float(l)) for o, l in zip(own_b, lab_b)}
    assert all((int(o), float(l)) in pts_big for o, l in zip(own_s, lab_s))


def test_poisson_cap_guard_raises():
    keys = rng.key_array(1, 2, np.arange(3))
    with pytest.raises(RuntimeError):
        rng.poisson_counts_from_keys(keys, np.full(3, 1e7), max_points=64)


def test_generator_paths_are_independent_and_reproducible():
    a1 = rng.generator(42, 1).random(5)
    a2 = rng.generator(42, 1).random(5)
    b = rng.generator(42, 2).random(5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
