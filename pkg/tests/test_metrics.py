import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asmg.metrics import MetricError, aggregate, auc, auc_bruteforce, log_loss


def test_perfect_ranking():
    assert auc([0.9, 0.1], [1, 0]) == 1.0


def test_all_ties_gives_half():
    assert auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5


def test_mixed_example():
    # pairs: (0.8,0.6) ok, (0.8,0.2) ok, (0.4,0.6) wrong, (0.4,0.2) ok -> 3/4
    assert auc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75


def test_single_class_rejected():
    with pytest.raises(MetricError):
        auc([0.2, 0.4], [1, 1])
    with pytest.raises(MetricError):
        auc([0.2, 0.4], [0, 0])


def test_exhaustive_small_inputs_match_bruteforce():
    rng = np.random.default_rng(5)
    for n in range(2, 13):
        for _ in range(40):
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            scores = np.round(rng.random(n), 1)  # coarse grid forces ties
            assert auc(scores, labels) == pytest.approx(auc_bruteforce(scores, labels), abs=1e-12)


def test_large_random_instances_match_bruteforce():
    rng = np.random.default_rng(17)
    for _ in range(200):
        labels = rng.integers(0, 2, size=100)
        if labels.min() == labels.max():
            continue
        scores = rng.random(100)
        assert abs(auc(scores, labels) - auc_bruteforce(scores, labels)) < 1e-12


@given(st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=4, max_size=30))
@settings(max_examples=100, deadline=None)
def test_monotone_transform_invariance(raw):
    labels = np.array([i % 2 for i in range(len(raw))])
    scores = np.array(raw, dtype=np.float64)
    base = auc(scores, labels)
    # scaling by a power of two is exact in float64, hence strictly monotone
    transformed = auc(scores * 4.0, labels)
    assert base == pytest.approx(transformed, abs=1e-12)


def test_label_flip_complement():
    rng = np.random.default_rng(11)
    scores = rng.permutation(np.linspace(0.01, 0.99, 20))  # tie-free
    labels = rng.integers(0, 2, size=20)
    labels[0], labels[1] = 0, 1
    assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)


def test_log_loss_half_scores():
    assert log_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-12)


def test_log_loss_clipped_perfection():
    val = log_loss([1.0, 0.0], [1, 0])
    assert 0 < val < 2e-7


def test_log_loss_hand_example():
    expected = -0.5 * (math.log(0.9) + math.log(0.8))
    assert log_loss([0.9, 0.2], [1, 0]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.164252, abs=1e-6)


def test_aggregate_single_run():
    s = aggregate([[0.8, 0.82, 0.78]])
    assert s.std == 0.0
    assert s.mean == pytest.approx(0.8)


def test_aggregate_identical_runs():
    s = aggregate([[0.8], [0.8], [0.8]])
    assert s.mean == pytest.approx(0.8)
    assert s.std == pytest.approx(0.0, abs=1e-12)


def test_aggregate_two_runs_sample_std():
    s = aggregate([[0.80], [0.82]])
    assert s.mean == pytest.approx(0.81, abs=1e-12)
    assert s.std == pytest.approx(0.014142135623, abs=1e-9)


def test_aggregate_empty_rejected():
    with pytest.raises(MetricError):
        aggregate([])
