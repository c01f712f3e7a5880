import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy.special import softmax
from scipy.stats import norm

from src.privicl.core.mechanisms import (
    NoiseParams,
    VoteHistogram,
    exponential_via_gumbel,
    find_best_k,
    gap_profile,
    gaussian_vector,
    joint_em_top_k,
    joint_utility_matrix,
    ptr_threshold_offset,
    rnm_gaussian,
    top_k_with_ptr,
    window_regularizer,
    zero_regularizer,
)
from src.privicl.utils.errors import EmptyHistogramError, InfeasibleSelectionError


def test_histogram_rejects_counts_above_ensemble_size():
    with pytest.raises(ValueError):
        VoteHistogram({0: 4}, ensemble_size=3)
    with pytest.raises(ValueError):
        VoteHistogram({0: -1}, ensemble_size=3)


def test_from_votes_keeps_zero_bins():
    hist = VoteHistogram.from_votes([1, 1, 0], label_ids=range(3))
    assert dict(hist.counts) == {0: 1, 1: 2, 2: 0}
    assert hist.ensemble_size == 3
    assert hist.sorted_items() == [(1, 2), (0, 1), (2, 0)]


def test_sentinels_are_negative_and_zero():
    hist = VoteHistogram({0: 2, 1: 1}, 2).with_sentinels(5)
    sentinels = [label for label in hist.counts if label < 0]
    assert len(sentinels) == 3
    assert all(hist.counts[s] == 0 for s in sentinels)


def test_rnm_zero_noise_is_majority(rng):
    hist = VoteHistogram({0: 7, 1: 3}, 10)
    assert rnm_gaussian(hist, 0.0, rng) == 0


def test_rnm_ties_go_to_lowest_label(rng):
    hist = VoteHistogram({3: 5, 1: 5, 2: 0}, 10)
    assert rnm_gaussian(hist, 0.0, rng) == 1


def test_rnm_empty_histogram_raises(rng):
    with pytest.raises(EmptyHistogramError):
        rnm_gaussian(VoteHistogram({}, 0), 1.0, rng)


def test_rnm_majority_rate_matches_gaussian_comparison(rng):
    sigma = 6.8516
    hist = VoteHistogram({0: 7, 1: 3}, 10)
    trials = 10_000
    wins = sum(rnm_gaussian(hist, sigma, rng) == 0 for _ in range(trials))
    expected = norm.cdf(4 / (sigma * math.sqrt(2)))
    assert abs(wins / trials - expected) < 0.02


def test_gaussian_vector_scales_noise_by_sensitivity(rng):
    noisy = gaussian_vector(np.zeros(20_000), 0.5, 2.0, rng)
    assert abs(noisy.std() - 1.0) < 0.02
    assert np.array_equal(gaussian_vector([1.0, 2.0], 0.0, 1.0, rng), [1.0, 2.0])


def test_exponential_matches_softmax(rng):
    utilities = np.array([0.0, 1.0, 2.0, -np.inf])
    n = 50_000
    counts = Counter(exponential_via_gumbel(utilities, 1.0, rng) for _ in range(n))
    expected = softmax(utilities[:3])
    empirical = np.array([counts[i] / n for i in range(3)])
    assert counts[3] == 0
    assert 0.5 * np.abs(empirical - expected).sum() < 0.02


def test_exponential_rejects_all_infeasible(rng):
    with pytest.raises(InfeasibleSelectionError):
        exponential_via_gumbel([-np.inf, -np.inf], 1.0, rng)
    with pytest.raises(ValueError):
        exponential_via_gumbel([np.nan, 1.0], 1.0, rng)


def test_gap_profile_and_regularizer():
    hist = VoteHistogram({0: 9, 1: 4, 2: 4, 3: 1}, 9)
    profile = gap_profile(hist, window_regularizer(2, 3))
    assert profile.gaps.tolist() == [5, 0, 3]
    utilities = profile.utilities()
    assert utilities[0] == -np.inf
    assert utilities[1:].tolist() == [0.0, 3.0]


def test_find_best_k_picks_the_large_gap(rng):
    hist = VoteHistogram({0: 100, 1: 100, 2: 100, 3: 0, 4: 0}, 100)
    picks = {find_best_k(hist, 10.0, zero_regularizer, rng) for _ in range(50)}
    assert picks == {3}


def test_find_best_k_default_window_needs_enough_candidates(rng):
    hist = VoteHistogram({0: 3, 1: 2, 2: 1}, 3)
    with pytest.raises(InfeasibleSelectionError):
        find_best_k(hist, 1.0, None, rng)


def test_ptr_threshold_offset():
    assert ptr_threshold_offset(0.0, 1e-5) == 0.0
    assert ptr_threshold_offset(1.0, 0.05) == pytest.approx(2 * norm.ppf(0.95))


def test_ptr_releases_a_dominant_token(rng):
    hist = VoteHistogram({7: 100, 8: 0, 9: 0}, 100)
    releases = [top_k_with_ptr(hist, 1, 1.0, 1e-4, rng) for _ in range(1000)]
    assert sum(r == frozenset({7}) for r in releases) >= 999


def test_ptr_false_release_rate_on_flat_histogram(rng):
    delta, n = 0.05, 10_000
    hist = VoteHistogram({0: 5, 1: 5, 2: 5}, 5)
    released = [top_k_with_ptr(hist, 1, 1.0, delta, rng) for _ in range(n)]
    rate = sum(r is not None for r in released) / n
    assert rate <= delta + 3 * math.sqrt(delta / n)
    # A passing test always releases the exact (tie-broken) top-k set.
    assert {r for r in released if r is not None} <= {frozenset({0})}


def test_ptr_pads_when_histogram_has_exactly_k_entries(rng):
    hist = VoteHistogram({0: 50, 1: 50}, 50)
    assert top_k_with_ptr(hist, 2, 0.0, 1e-5, rng) == frozenset({0, 1})


def test_joint_utility_matrix_is_decreasing_along_rows():
    matrix = joint_utility_matrix(VoteHistogram({0: 5, 1: 3, 2: 3, 3: 0}, 5), 2)
    assert matrix.k == 2 and matrix.d == 4
    assert np.all(np.diff(matrix.entries, axis=1) < 0)
    assert np.all(np.diff(matrix.entries, axis=0) > 0)
    assert matrix.item_order == (0, 1, 2, 3)


def test_joint_em_symmetric_counts_are_uniform(rng):
    hist = VoteHistogram({0: 10, 1: 10, 2: 10}, 10)
    n = 10_000
    counts = Counter(joint_em_top_k(hist, 3, 1.0, rng) for _ in range(n))
    assert len(counts) == 6
    for count in counts.values():
        assert abs(count / n - 1 / 6) < 0.02


def test_joint_em_matches_sequence_enumeration(rng):
    hist = VoteHistogram({10: 5, 11: 3, 12: 3, 13: 0}, 5)
    k, epsilon = 2, 1.5
    matrix = joint_utility_matrix(hist, k)

    sequences = list(itertools.permutations(range(matrix.d), k))
    scores = np.array(
        [np.ceil(min(matrix.entries[i, j] for i, j in enumerate(s))) for s in sequences]
    )
    oracle = softmax(epsilon * scores / 2)

    n = 40_000
    counts = Counter(joint_em_top_k(hist, k, epsilon, rng) for _ in range(n))
    labelled = [tuple(matrix.item_order[j] for j in s) for s in sequences]
    empirical = np.array([counts[s] / n for s in labelled])
    assert sum(counts.values()) == n
    assert 0.5 * np.abs(empirical - oracle).sum() < 0.02


def test_joint_em_needs_k_candidates(rng):
    with pytest.raises(ValueError):
        joint_em_top_k(VoteHistogram({0: 1}, 1), 2, 1.0, rng)


def test_noise_params_validation():
    assert NoiseParams(sigma=3.0, sensitivity=1.5).noise_multiplier == 2.0
    with pytest.raises(ValueError):
        NoiseParams(epsilon=0.0)
    with pytest.raises(ValueError):
        NoiseParams(delta=1.0)
