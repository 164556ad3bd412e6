import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sps

from moeleak.stats import (UndefinedCorrelation, expert_error_rate, leaky_count, load_correlation, pearson,
                           sequence_accuracy, token_asr, topk_accuracy, welch_t)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_identical_groups_zero_t(rng):
    g = rng.standard_normal((10, 3, 4))
    rep = welch_t(g, g)
    assert np.all(rep.t == 0) and rep.leaky_count == 0 and rep.t.shape == (12,)


def test_leaky_count_example():
    assert leaky_count([5.0, 3.0, 4.6], 4.5) == 2
    assert leaky_count([-5.0, 4.5]) == 1


def test_welch_matches_scipy(rng):
    a = rng.normal(0, 1, (30, 20))
    b = rng.normal(0.5, 2, (45, 20))
    want = sps.ttest_ind(a, b, equal_var=False).statistic
    assert np.allclose(welch_t(a, b).t, want, rtol=1e-10)


def test_constant_coordinates_use_variance_floor():
    a, b = np.zeros((5, 2)), np.zeros((5, 2))
    b[:, 1] = 1.0
    t = welch_t(a, b).t
    assert t[0] == 0 and t[1] == pytest.approx(-1e6)


def test_welch_errors():
    with pytest.raises(ValueError):
        welch_t(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        welch_t(np.zeros((3, 3)), np.zeros((4, 2)))


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 6)), elements=finite), st.data())
def test_welch_symmetry(a, data):
    b = data.draw(arrays(np.float64, (data.draw(st.integers(2, 8)), a.shape[1]), elements=finite))
    ab, ba = welch_t(a, b), welch_t(b, a)
    assert np.array_equal(ab.t, -ba.t) and ab.leaky_count == ba.leaky_count


def test_pearson_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    b = np.array([2.0, 4.0, 6.1])
    # direct arithmetic: deviations (-1, 0, 1) and (-2.0333, -0.0333, 2.0667)
    db = b - b.mean()
    want = (-1 * db[0] + db[2]) / (np.sqrt(2.0) * np.sqrt(np.sum(db**2)))
    assert pearson(a, b) == pytest.approx(want, abs=1e-12)
    assert pearson(a, b) == pytest.approx(0.99996, abs=1e-4)


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(3, 20), elements=st.floats(-100, 100)), st.data())
def test_pearson_scale_invariance(a, data):
    b = data.draw(arrays(np.float64, len(a), elements=st.floats(-100, 100)))
    alpha = data.draw(st.sampled_from([-7.5, -1.0, -0.25, 0.5, 3.0, 12.0]))
    beta = data.draw(st.floats(-50, 50))
    assume(np.ptp(a) > 1e-3 and np.ptp(b) > 1e-3)
    assert pearson(alpha * a + beta, b) == pytest.approx(np.sign(alpha) * pearson(a, b), abs=1e-9)


def test_token_asr():
    assert token_asr([1, 2, 3], [1, 2, 3]) == 1.0
    assert token_asr([1, 2, 3], [4, 5, 6]) == 0.0
    truth = np.arange(100)
    pred = truth.copy()
    pred[:7] = -1
    assert token_asr(pred, truth) == pytest.approx(0.93)
    with pytest.raises(ValueError):
        token_asr([1], [1, 2])


def test_topk_examples():
    s = np.array([[0.1, 0.7, 0.2], [0.5, 0.3, 0.2]])
    assert topk_accuracy(s, [1, 0], 1) == 1.0
    assert topk_accuracy(s, [2, 2], 3) == 1.0
    assert topk_accuracy(s, [2, 1], 1) == 0.0
    assert topk_accuracy(np.ones((1, 4)), [0], 1) == 1.0  # ties rank the lower index first
    assert topk_accuracy(np.ones((1, 4)), [1], 1) == 0.0
    with pytest.raises(ValueError):
        topk_accuracy(s, [0, 0], 4)


def test_topk_random_scores_near_chance(rng):
    n, c = 20000, 10
    acc = topk_accuracy(rng.random((n, c)), rng.integers(0, c, n), 1)
    assert abs(acc - 1 / c) <= 3 * np.sqrt(0.1 * 0.9 / n)


def test_sequence_accuracy_counts_implicated_only():
    truth = np.array([0, 1, 1, 0, 0, 0])
    pred = np.array([0, 1, 1, 1, 0, 0])
    evidence = np.array([0, 1, 1, 1, 1, 0], bool)
    assert sequence_accuracy(pred, truth, evidence) == pytest.approx(1 - 1 / 4)
    assert sequence_accuracy(pred, truth) == pytest.approx(1 - 1 / 3)
    assert expert_error_rate(pred, truth, evidence) == pytest.approx(0.25)
    assert sequence_accuracy(np.zeros(4), np.zeros(4)) == 1.0


def test_load_correlation(rng):
    t = rng.random((5, 3, 4))
    assert load_correlation(t, t) == pytest.approx(1.0)
    assert load_correlation(t[0], 2 * t[0] + 1) == pytest.approx(1.0)
