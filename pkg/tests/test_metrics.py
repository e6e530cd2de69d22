import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import auc_pairwise, weighted_prf_direct, wilcoxon_exact_brute
from stainalign.errors import InvalidInputError, UndefinedMetricError, UnstableCIError
from stainalign.metrics import (
    accuracy,
    bootstrap_ci,
    confusion_matrix,
    cosine_matrix,
    cosine_similarity,
    fit_logreg,
    roc_auc,
    score_metrics,
    true_positive_scores,
    weighted_f1,
    weighted_prf,
    wilcoxon_enumeration,
    wilcoxon_signed_rank,
)

# --- logistic regression --------------------------------------------------


def test_logreg_1d_separable():
    X = np.array([[-1.0]] * 5 + [[1.0]] * 5)
    y = np.array([0] * 5 + [1] * 5)
    m = fit_logreg(X, y, lam=0.01)
    assert m.weights[0] > 0 and m.converged
    assert abs(-m.intercept / m.weights[0]) < 1e-3
    assert m.predict_proba([[0.0]])[0] == pytest.approx(0.5, abs=1e-3)


def test_logreg_symmetric_intercept():
    rng = np.random.default_rng(0)
    pos = rng.normal(1.0, 1.0, size=(20, 3))
    X = np.vstack([pos, -pos])
    y = np.array([1] * 20 + [0] * 20)
    assert abs(fit_logreg(X, y, lam=1.0).intercept) < 1e-4


def test_logreg_shrinkage():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 4))
    y = (X[:, 0] > 0).astype(int)
    assert np.linalg.norm(fit_logreg(X, y, lam=1e6).weights) < 1e-3


def test_logreg_gradient_is_zero_at_optimum():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 3))
    y = (X @ [1, -2, 0.5] + rng.normal(size=40) > 0).astype(int)
    m = fit_logreg(X, y, lam=0.5)
    p = m.predict_proba(X)
    g_w = X.T @ (p - y) / 40 + 0.5 * m.weights
    g_b = np.mean(p - y)
    assert np.linalg.norm(np.append(g_w, g_b)) < 1e-6


def test_logreg_single_class():
    with pytest.raises(UndefinedMetricError, match="constant"):
        fit_logreg(np.ones((3, 2)), [1, 1, 1])


# --- point metrics --------------------------------------------------------


def test_auc_examples():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


@given(st.integers(2, 200), st.integers(0, 10**6), st.booleans())
def test_auc_matches_pairwise(n, seed, coarse):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 5, n) / 4 if coarse else rng.random(n)
    assert abs(roc_auc(s, y) - auc_pairwise(s, y)) < 1e-9


def test_hand_confusion_example():
    # TP=3, FN=1, FP=1, TN=5
    scores = [0.9] * 3 + [0.1] + [0.8] + [0.2] * 5
    labels = [1] * 4 + [0] * 6
    cm = confusion_matrix(scores, labels)
    assert cm.tolist() == [[5, 1], [1, 3]]
    assert weighted_prf(cm)[2] == pytest.approx(0.8, abs=1e-15)
    assert weighted_f1(scores, labels) == pytest.approx(0.8, abs=1e-15)


def test_threshold_half_is_positive():
    assert confusion_matrix([0.5], [1]).tolist() == [[0, 0], [0, 1]]
    assert accuracy([0.5, 0.49], [1, 0]) == 1.0


@given(st.tuples(*[st.integers(0, 30)] * 4).filter(lambda c: sum(c) > 0))
def test_weighted_prf_matches_formula(c):
    tp, fn, fp, tn = c
    got = weighted_prf([[tn, fp], [fn, tp]])
    np.testing.assert_allclose(got, weighted_prf_direct(tp, fn, fp, tn), rtol=1e-12, atol=1e-15)


def test_score_metrics_report():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 50)
    s = np.clip(y * 0.4 + rng.random(50) * 0.6, 0, 1)
    r = score_metrics(s, y, n_boot=200, seed=1)
    assert sum(map(sum, r.confusion)) == 50
    for name in ("auc", "f1", "precision", "recall"):
        lo, hi = r.ci[name]
        assert 0 <= lo <= hi <= 1
    assert "pred 1" in r.confusion_table()
    single = score_metrics([0.2, 0.7], [1, 1])
    assert single.auc is None and "auc_undefined_single_class" in single.flags


# --- bootstrap ------------------------------------------------------------


def test_bootstrap_constant_metric():
    assert bootstrap_ci(lambda s, y: 0.3, [0.1, 0.2, 0.3], [0, 1, 0], 100, 0) == (0.3, 0.3)


def test_bootstrap_seeded():
    s, y = np.random.default_rng(0).random(30), np.arange(30) % 2
    assert bootstrap_ci(roc_auc, s, y, 300, 5) == bootstrap_ci(roc_auc, s, y, 300, 5)


def test_bootstrap_accuracy_contains_point():
    rng = np.random.default_rng(42)
    y = rng.integers(0, 2, 100)
    s = np.where(rng.random(100) < 0.8, y, 1 - y) * 0.6 + 0.2
    lo, hi = bootstrap_ci(accuracy, s, y, 1000, 42)
    assert lo <= accuracy(s, y) <= hi


@given(st.integers(0, 10**6))
def test_bootstrap_nested_levels(seed):
    rng = np.random.default_rng(seed)
    s, y = rng.random(25), rng.integers(0, 2, 25)
    y[:2] = [0, 1]
    lo95, hi95 = bootstrap_ci(weighted_f1, s, y, 200, seed, 0.95)
    lo90, hi90 = bootstrap_ci(weighted_f1, s, y, 200, seed, 0.90)
    assert lo95 <= lo90 <= hi90 <= hi95


def test_bootstrap_unstable_and_small():
    calls = []

    def flaky(s, y):
        calls.append(1)
        if len(calls) % 3:
            raise UndefinedMetricError("undefined")
        return 0.5

    with pytest.raises(UnstableCIError, match="134 of 200"):
        bootstrap_ci(flaky, np.linspace(0, 1, 21), np.arange(21) % 2, 200, 0)
    calls.clear()

    def mostly_fine(s, y):
        calls.append(1)
        if len(calls) % 3 == 0:
            raise UndefinedMetricError("undefined")
        return 0.5

    values_ci = bootstrap_ci(mostly_fine, np.linspace(0, 1, 21), np.arange(21) % 2, 200, 0)
    assert values_ci == (0.5, 0.5)
    with pytest.raises(InvalidInputError):
        bootstrap_ci(accuracy, [0.1], [0], 10, 0)


# --- Wilcoxon -------------------------------------------------------------


def test_wilcoxon_examples():
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5], [0] * 5) == 0.0625
    assert wilcoxon_signed_rank([1, 2, 3], [1, 2, 3]) == 1.0
    d = [1, 2, 3, 4, 5, -6]
    assert wilcoxon_signed_rank(d, [0] * 6) == wilcoxon_exact_brute(d)


@given(st.lists(st.integers(-1000, 1000).filter(bool), min_size=1, max_size=10, unique_by=abs))
def test_wilcoxon_exact_tie_free(d):
    assert wilcoxon_signed_rank(d, np.zeros(len(d))) == wilcoxon_exact_brute(d)


@given(st.lists(st.integers(-4, 4), min_size=1, max_size=12))
def test_wilcoxon_exact_with_ties(d):
    assert wilcoxon_signed_rank(d, np.zeros(len(d))) == pytest.approx(wilcoxon_exact_brute(d), abs=1e-15)
    assert wilcoxon_enumeration(d, np.zeros(len(d))) == pytest.approx(wilcoxon_exact_brute(d), abs=1e-12)


def test_wilcoxon_normal_approx_vs_scipy():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(3)
    x, y = rng.normal(0.3, 1, 40), rng.normal(0, 1, 40)
    ref = wilcoxon(x, y, method="approx", correction=True).pvalue
    assert wilcoxon_signed_rank(x, y) == pytest.approx(ref, rel=1e-9)


def test_wilcoxon_errors():
    with pytest.raises(InvalidInputError):
        wilcoxon_signed_rank([1, 2], [1])


def test_true_positive_selection():
    a = np.array([0.9, 0.6, 0.2, 0.8])
    b = np.array([0.7, 0.3, 0.9, 0.6])
    y = np.array([1, 1, 1, 0])
    ja, jb = true_positive_scores(a, b, y, "joint")
    assert ja.tolist() == [0.9] and jb.tolist() == [0.7]
    aa, _ = true_positive_scores(a, b, y, "any")
    assert aa.tolist() == [0.9, 0.6, 0.2]
    with pytest.raises(InvalidInputError):
        true_positive_scores(a, b, y, "some")


# --- cosine ---------------------------------------------------------------


def test_cosine_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity(a, -a) == pytest.approx(-1.0)
    with pytest.raises(InvalidInputError):
        cosine_similarity([0, 0], [1, 0])
    M = cosine_matrix(np.eye(3), np.eye(3))
    assert np.array_equal(M, np.eye(3))
