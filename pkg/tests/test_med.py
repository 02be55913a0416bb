import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacl import med
from oracles import edit_distance_bfs, edit_distance_by_scripts


def test_levenshtein_known_values():
    assert med.levenshtein("kitten", "sitting") == 3
    assert med.levenshtein("", "abc") == 3
    assert med.levenshtein("abc", "abc") == 0
    assert med.levenshtein((0, 1, 2, 3), (1, 0, 2, 3)) == 2


def test_script_oracle_agrees_with_bfs_on_short_strings():
    alphabet = (0, 1, 2)
    for la in range(4):
        for lb in range(4):
            for a in itertools.product(alphabet, repeat=la):
                for b in itertools.product(alphabet, repeat=lb):
                    if la * lb == 0:
                        continue
                    assert edit_distance_by_scripts([(a, b)])[0] == edit_distance_bfs(a, b, alphabet)


@given(st.lists(st.integers(0, 4), max_size=6), st.lists(st.integers(0, 4), max_size=6))
@settings(max_examples=200, deadline=None)
def test_levenshtein_metric_properties(a, b):
    d = med.levenshtein(a, b)
    assert d == med.levenshtein(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)


def test_identity_distances_matches_scalar_dp():
    rng = np.random.default_rng(3)
    perms = np.stack([rng.permutation(9) for _ in range(200)])
    expected = [med.levenshtein(range(9), p) for p in perms]
    assert med.identity_distances(perms).tolist() == expected


def test_exhaustive_distribution_small_n():
    dist = med.enumerate_degree_distribution(4)
    assert dist.total == 24
    assert dist.counts.get(1, 0) == 0
    assert dist.counts[0] == 1
    # swaps of adjacent pairs: three permutations at degree 2
    assert dist.counts[2] >= 3
    with pytest.raises(ValueError):
        med.enumerate_degree_distribution(9)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6, 9, 16, 32])
def test_feasible_degrees_exclude_one(n):
    degrees = med.feasible_degrees(n)
    assert 1 not in degrees
    assert degrees[0] == 0
    assert max(degrees) <= n
    assert med.num_classes(n) == len(degrees)


def test_feasible_degrees_n16_full_range():
    assert med.feasible_degrees(16) == (0,) + tuple(range(2, 17))
    assert med.num_classes(16) == 16


def test_labels_round_trip():
    for label, degree in enumerate(med.feasible_degrees(16)):
        assert med.degree_to_label(degree, 16) == label
        assert med.label_to_degree(label, 16) == degree
    with pytest.raises(ValueError):
        med.degree_to_label(1, 16)


def test_witnesses_verify():
    for degree, order in med.degree_witnesses(12).items():
        assert med.levenshtein(range(12), order) == degree


def test_sample_degree_returns_requested_degree():
    sampler = med.ShuffleSampler(10, np.random.default_rng(0))
    for degree in med.feasible_degrees(10):
        s = sampler.sample_degree(degree)
        assert s.degree == degree
        assert med.levenshtein(range(10), s.perm.order) == degree


def test_sampler_rejects_infeasible_degree():
    sampler = med.ShuffleSampler(8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sampler.sample_degree(1)
    with pytest.raises(ValueError):
        sampler.sample_degree(9)


def test_sampler_is_deterministic_per_seed():
    a = med.ShuffleSampler(12, np.random.default_rng(5))
    b = med.ShuffleSampler(12, np.random.default_rng(5))
    assert [a.sample().perm.order for _ in range(50)] == [b.sample().perm.order for _ in range(50)]


def test_sampler_rare_degrees_use_fallback():
    # degree 3 at n=16 is essentially never hit by rejection
    sampler = med.ShuffleSampler(16, np.random.default_rng(1))
    for _ in range(5):
        assert sampler.sample_degree(3).degree == 3


def test_uniform_permutation_arm_skews_to_high_degrees():
    sampler = med.ShuffleSampler(16, np.random.default_rng(2))
    degrees = Counter(sampler.sample_uniform_permutation().degree for _ in range(400))
    assert sum(v for d, v in degrees.items() if d >= 13) > 0.7 * 400


def test_shuffle_sample_rejects_mislabelled_degree():
    perm = med.Permutation((1, 0, 2, 3))
    with pytest.raises(med.DegreeVerificationError):
        med.ShuffleSample(perm, 3, med.degree_to_label(3, 4))


def test_permutation_validation():
    with pytest.raises(ValueError):
        med.Permutation((0, 0, 1))
    with pytest.raises(ValueError):
        med.Permutation((0,))
    p = med.Permutation((2, 0, 1))
    assert p.inverse().inverse() == p


def test_chance_accuracy():
    assert med.chance_accuracy(16) == pytest.approx(1 / 16)


def test_script_oracle_vectorised_batch():
    pairs = [((0, 1, 2), (2, 1, 0)), ((0, 1, 2), (0, 1, 2)), ((0, 1, 2), (1, 2, 0))]
    assert edit_distance_by_scripts(pairs).tolist() == [2, 0, 2]
