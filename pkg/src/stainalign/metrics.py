"""Binary classification metrics, bootstrap intervals and paired tests."""

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError, UnstableCIError
from .rng import generator

# ---------------------------------------------------------------------------
# logistic-regression readout


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    n_iter: int = 0
    converged: bool = True

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))


def _sigmoid(t):
    return np.exp(-np.logaddexp(0.0, -t))


def _logreg_objective(X1, y, theta, lam):
    t = X1 @ theta
    # mean of log(1 + e^t) - y t
    return np.mean(np.logaddexp(0.0, t) - y * t) + 0.5 * lam * theta[:-1] @ theta[:-1]


def fit_logreg(X, y, lam=1.0, tol=1e-6, max_iter=500):
    """L2-penalized logistic regression by damped Newton (IRLS) steps.

    Minimizes ``mean(CE) + lam/2 * |w|^2`` with an unpenalized intercept and
    stops when the gradient norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise InvalidInputError("expected an (n, d) design matrix and n labels")
    if X.shape[0] < 2:
        raise InvalidInputError("need at least two samples")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("labels must be 0 or 1")
    if np.all(y == y[0]):
        raise UndefinedMetricError(
            "only one class present; use a constant classifier instead of logistic regression"
        )
    n, d = X.shape
    X1 = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, lam)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)
    obj = _logreg_objective(X1, y, theta, lam)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(X1 @ theta)
        grad = X1.T @ (p - y) / n + reg * theta
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        s = p * (1.0 - p)
        hess = (X1.T * s) @ X1 / n + np.diag(reg)
        # tiny ridge keeps the intercept direction solvable on separable data
        hess[np.diag_indices_from(hess)] += 1e-12
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        while True:
            cand = theta - scale * step
            new_obj = _logreg_objective(X1, y, cand, lam)
            if new_obj <= obj or scale < 1e-10:
                break
            scale *= 0.5
        theta, obj = cand, new_obj
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), it, converged)


# ---------------------------------------------------------------------------
# point metrics


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidInputError("labels must be 0 or 1")
    return scores, labels.astype(np.intp)


def roc_auc(scores, labels):
    """Mann-Whitney AUC; tied positive/negative pairs earn half credit."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(scores, labels, threshold=0.5):
    """``[[TN, FP], [FN, TP]]``; a score equal to the threshold counts positive."""
    scores, labels = _check_binary(scores, labels)
    pred = (scores >= threshold).astype(np.intp)
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def weighted_prf(cm):
    """Support-weighted precision, recall and F1 from a 2x2 confusion matrix.

    Classes with no predictions (or no support) contribute 0 for the
    undefined quantity.
    """
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    total = support.sum()
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    w = support / total
    return float(w @ prec), float(w @ rec), float(w @ f1)


def weighted_f1(scores, labels):
    return weighted_prf(confusion_matrix(scores, labels))[2]


def weighted_precision(scores, labels):
    return weighted_prf(confusion_matrix(scores, labels))[0]


def weighted_recall(scores, labels):
    return weighted_prf(confusion_matrix(scores, labels))[1]


def accuracy(scores, labels):
    scores, labels = _check_binary(scores, labels)
    return float(np.mean((scores >= 0.5) == (labels == 1)))


METRICS = {
    "auc": roc_auc,
    "f1": weighted_f1,
    "precision": weighted_precision,
    "recall": weighted_recall,
}


@dataclass
class MetricReport:
    n: int
    confusion: list
    auc: float | None = None
    f1: float | None = None
    precision: float | None = None
    recall: float | None = None
    ci: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)

    def confusion_table(self):
        (tn, fp), (fn, tp) = self.confusion
        width = max(len(str(v)) for v in (tn, fp, fn, tp)) + 2
        return "\n".join(
            [
                f"{'':>8}{'pred 0':>{width + 4}}{'pred 1':>{width + 4}}",
                f"{'true 0':>8}{tn:>{width + 4}}{fp:>{width + 4}}",
                f"{'true 1':>8}{fn:>{width + 4}}{tp:>{width + 4}}",
            ]
        )


def score_metrics(scores, labels, n_boot=0, seed=0):
    """Point metrics at threshold 0.5, optionally with bootstrap 95% intervals."""
    scores, labels = _check_binary(scores, labels)
    cm = confusion_matrix(scores, labels)
    prec, rec, f1 = weighted_prf(cm)
    report = MetricReport(n=int(labels.size), confusion=cm.tolist(), f1=f1, precision=prec, recall=rec)
    try:
        report.auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        report.flags.append("auc_undefined_single_class")
    if n_boot:
        for name, fn in METRICS.items():
            if getattr(report, name) is None:
                continue
            try:
                report.ci[name] = list(bootstrap_ci(fn, scores, labels, n_boot=n_boot, seed=seed))
            except UnstableCIError:
                report.flags.append(f"{name}_ci_unstable")
    return report


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_distribution(metric, scores, labels, n_boot=1000, seed=0):
    """Metric values on ``n_boot`` resamples plus the count of skipped ones."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n = len(scores)
    if n < 2:
        raise InvalidInputError("bootstrap needs at least two samples")
    idx = generator(seed).integers(0, n, size=(n_boot, n))
    values, skipped = [], 0
    for row in idx:
        try:
            values.append(metric(scores[row], labels[row]))
        except UndefinedMetricError:
            skipped += 1
    if skipped > n_boot / 2:
        raise UnstableCIError(f"{skipped} of {n_boot} bootstrap resamples were undefined")
    return np.asarray(values, dtype=np.float64), skipped


def bootstrap_ci(metric, scores, labels, n_boot=1000, seed=0, level=0.95):
    """Percentile bootstrap interval ``(lo, hi)`` for ``metric(scores, labels)``."""
    values, _ = bootstrap_distribution(metric, scores, labels, n_boot, seed)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(lo), float(hi)


def mean_ci(values, n_boot=1000, seed=0, level=0.95):
    """Percentile bootstrap interval of a sample mean."""
    values = np.asarray(values, dtype=np.float64)
    return bootstrap_ci(lambda v, _: float(np.mean(v)), values, np.zeros(len(values)), n_boot, seed, level)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

EXACT_MAX_N = 12


def _signed_rank_setup(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size == 0:
        raise InvalidInputError("wilcoxon needs two equal-length, non-empty samples")
    d = x - y
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    return d, ranks


def wilcoxon_signed_rank(x, y):
    """Two-sided p-value of the Wilcoxon signed-rank test on ``x - y``.

    Zero differences are dropped and tied magnitudes get average ranks. Up to
    12 non-zero differences the p-value is exact: the share of the 2**n sign
    assignments whose statistic min(W+, W-) is at most the observed one. Beyond
    that, a normal approximation with tie and continuity corrections is used.
    """
    d, ranks = _signed_rank_setup(x, y)
    n = d.size
    if n == 0:
        return 1.0
    w_plus = ranks[d > 0].sum()
    total = ranks.sum()
    w = min(w_plus, total - w_plus)
    if n <= EXACT_MAX_N:
        # ranks are multiples of 1/2: work in integer half-ranks
        r2 = np.rint(2 * ranks).astype(np.int64)
        w2 = int(round(2 * w))
        t2 = int(r2.sum())
        signs = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(np.int64)
        plus = signs @ r2
        stat = np.minimum(plus, t2 - plus)
        return float(np.count_nonzero(stat <= w2) / (1 << n))
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def wilcoxon_enumeration(x, y):
    """Reference exact p-value by explicit enumeration of sign vectors (slow)."""
    d, ranks = _signed_rank_setup(x, y)
    n = d.size
    if n == 0:
        return 1.0
    w_plus = ranks[d > 0].sum()
    w = min(w_plus, ranks.sum() - w_plus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        plus = sum(r for r, s in zip(ranks, signs) if s)
        if min(plus, ranks.sum() - plus) <= w + 1e-9:
            hits += 1
    return hits / 2**n


def true_positive_scores(scores_a, scores_b, labels, selection="joint", threshold=0.5):
    """Paired scores of positive slides used for comparing two models.

    ``joint`` keeps positives both models call positive; ``any`` keeps
    positives that at least one model calls positive.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    if selection == "joint":
        keep = pos & (a >= threshold) & (b >= threshold)
    elif selection == "any":
        keep = pos & ((a >= threshold) | (b >= threshold))
    else:
        raise InvalidInputError(f"unknown selection {selection!r}")
    return a[keep], b[keep]


# ---------------------------------------------------------------------------
# similarity


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidInputError("cosine similarity is undefined for a zero vector")
    return np.clip((A / na) @ (B / nb).T, -1.0, 1.0)
