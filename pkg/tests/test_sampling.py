"""Adjacency probabilities and reference sampling statistics."""

import numpy as np
import pytest
from scipy.stats import binomtest

from ordfusion.datasets import OrdinalDataset, OrdinalSample
from ordfusion.sampling import (
    NoReferenceAvailable,
    adjacency_probabilities,
    sample_reference,
    sample_reference_label,
)


def _ds_with_counts(counts):
    samples = []
    for label, n in enumerate(counts, start=1):
        for _ in range(n):
            samples.append(OrdinalSample(np.zeros((4, 4), dtype=np.float32), label))
    return OrdinalDataset(samples, k=len(counts))


def test_inverse_ratio_formula():
    probs = adjacency_probabilities("inverse_ratio", [10, 80, 0, 20, 10], m=3, k=5)
    assert probs.p_left == pytest.approx(0.2)
    assert probs.p_right == pytest.approx(0.8)


def test_equal_sampler():
    probs = adjacency_probabilities("equal", [5, 0, 5], m=2, k=3)
    assert (probs.p_left, probs.p_right) == (0.5, 0.5)


def test_boundary_categories():
    counts = [10, 10, 10, 10, 10]
    assert adjacency_probabilities("equal", counts, m=1, k=5).p_right == 1.0
    assert adjacency_probabilities("inverse_ratio", counts, m=1, k=5).p_right == 1.0
    assert adjacency_probabilities("equal", counts, m=5, k=5).p_left == 1.0
    assert adjacency_probabilities("inverse_ratio", counts, m=5, k=5).p_left == 1.0


def test_one_empty_neighbor_forces_all_mass():
    counts = [10, 10, 0, 10]
    for kind in ("equal", "inverse_ratio"):
        probs = adjacency_probabilities(kind, counts, m=2, k=4)
        assert (probs.p_left, probs.p_right) == (1.0, 0.0)
    # degenerate fallback: both kinds give identical distributions
    a = adjacency_probabilities("equal", counts, m=2, k=4)
    b = adjacency_probabilities("inverse_ratio", counts, m=2, k=4)
    assert (a.p_left, a.p_right) == (b.p_left, b.p_right)


def test_both_neighbors_empty_raises():
    counts = [0, 5, 0]
    with pytest.raises(NoReferenceAvailable):
        adjacency_probabilities("equal", counts, m=2, k=3)
    ds = _ds_with_counts([0, 5, 0])
    with pytest.raises(NoReferenceAvailable):
        sample_reference("equal", ds, 2, np.random.default_rng(0))


def test_minority_bias():
    # fewer samples on the left neighbor -> more probability mass on the left
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_left = int(rng.integers(1, 100))
        n_right = int(rng.integers(1, 100))
        probs = adjacency_probabilities("inverse_ratio", [n_left, 0, n_right], m=2, k=3)
        if n_left < n_right:
            assert probs.p_left > probs.p_right
        elif n_left > n_right:
            assert probs.p_left < probs.p_right


def test_invalid_kind_and_label():
    with pytest.raises(ValueError):
        adjacency_probabilities("fancy", [1, 1], m=1, k=2)
    with pytest.raises(ValueError):
        adjacency_probabilities("equal", [1, 1], m=3, k=2)


def test_inverse_ratio_monte_carlo():
    ds = _ds_with_counts([0, 80, 10, 20, 0])  # m=3: left 80, right 20
    rng = np.random.default_rng(99)
    draws = [sample_reference("inverse_ratio", ds, 3, rng).label for _ in range(10_000)]
    share_left = sum(1 for r in draws if r == 2) / len(draws)
    assert 0.18 <= share_left <= 0.22  # true probability 20/(80+20)
    assert all(abs(3 - r) == 1 for r in draws)


def test_equal_monte_carlo_binomial():
    ds = _ds_with_counts([0, 80, 10, 20, 0])
    rng = np.random.default_rng(7)
    n = 10_000
    lefts = sum(
        1 for _ in range(n) if sample_reference("equal", ds, 3, rng).label == 2
    )
    assert 0.48 <= lefts / n <= 0.52
    assert binomtest(lefts, n, 0.5).pvalue > 0.01


def test_reference_always_adjacent(tiny_ds):
    rng = np.random.default_rng(5)
    for _ in range(500):
        m = int(rng.integers(1, tiny_ds.k + 1))
        ref = sample_reference("inverse_ratio", tiny_ds, m, rng)
        assert abs(ref.label - m) == 1


def test_within_category_uniform():
    ds = _ds_with_counts([6, 5])
    rng = np.random.default_rng(11)
    hits = np.zeros(len(ds))
    for _ in range(6000):
        m = 2
        # all references come from category 1 (boundary)
        label = sample_reference_label("equal", ds.counts, m, ds.k, rng)
        assert label == 1
    # index-level uniformity
    from ordfusion.sampling import sample_reference_index

    for _ in range(6000):
        hits[sample_reference_index("equal", ds, 2, rng)] += 1
    cat1 = ds.indices_of_label(1)
    observed = hits[cat1]
    assert observed.sum() == 6000
    assert observed.min() > 800  # roughly uniform across the 6 members


def test_sampling_deterministic_under_fixed_rng(tiny_ds):
    a = [sample_reference("inverse_ratio", tiny_ds, 2, np.random.default_rng(3)).label for _ in range(5)]
    b = [sample_reference("inverse_ratio", tiny_ds, 2, np.random.default_rng(3)).label for _ in range(5)]
    assert a == b
