"""Patient-grouped nested cross-validation and embedding alignment analysis."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregator import embed_slides
from .errors import InvalidInputError, StainAlignError, UndefinedMetricError
from .metrics import (
    MetricReport,
    cosine_matrix,
    fit_logreg,
    mean_ci,
    score_metrics,
    true_positive_scores,
    weighted_f1,
    wilcoxon_signed_rank,
)
from .rng import derive_seed, generator
from .trainer import TrainState, fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: frozenset
    validation: frozenset
    test: frozenset


def make_cv_folds(records, k=5, seed=42):
    """Rotate ``k`` patient groups through the test/validation roles.

    ``records`` are objects with ``slide_id`` and ``patient_id``. Patients are
    shuffled and cut at ``floor(g * n / k)`` so group sizes differ by at most
    one and larger groups are spread around the rotation; fold ``f`` tests on
    group ``f``, validates on group ``f + 1 (mod k)`` and trains on the rest.
    """
    if k < 3:
        raise InvalidInputError("need k >= 3 for disjoint train/validation/test groups")
    by_patient = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r.slide_id)
    patients = sorted(by_patient)
    n = len(patients)
    if n < k:
        raise InvalidInputError(f"{n} patients cannot fill {k} folds")
    order = generator(seed).permutation(n)
    shuffled = [patients[i] for i in order]
    cuts = [g * n // k for g in range(k + 1)]
    groups = [
        frozenset(s for p in shuffled[cuts[g] : cuts[g + 1]] for s in by_patient[p]) for g in range(k)
    ]
    folds = []
    for f in range(k):
        test, val = groups[f], groups[(f + 1) % k]
        train = frozenset().union(*(groups[g] for g in range(k) if g not in (f, (f + 1) % k)))
        folds.append(FoldSplit(f, train, val, test))
    return folds


# ---------------------------------------------------------------------------
# alignment


@dataclass
class AlignmentReport:
    n: int
    paired_mean: float
    paired_ci: tuple
    shuffled_mean: float
    shuffled_ci: tuple
    difference_mean: float
    difference_ci: tuple
    paired: np.ndarray = field(repr=False)
    shuffled: np.ndarray = field(repr=False)
    difference: np.ndarray = field(repr=False)
    wilcoxon_p: float | None = None

    def as_dict(self):
        out = asdict(self)
        for key in ("paired", "shuffled", "difference"):
            out[key] = [float(v) for v in out[key]]
        return out


def alignment_scores(he, ihc, pairing=None):
    """Per-slide paired cosine, mean unpaired cosine and their difference.

    ``pairing[i]`` is the row of ``ihc`` matched with row ``i`` of ``he``
    (identity by default).
    """
    he = np.asarray(he, dtype=np.float64)
    ihc = np.asarray(ihc, dtype=np.float64)
    n = he.shape[0]
    if n < 2:
        raise InvalidInputError("alignment analysis needs at least 2 pairs")
    if ihc.shape != he.shape:
        raise InvalidInputError("H&E and IHC embedding matrices differ in shape")
    pairing = np.arange(n) if pairing is None else np.asarray(pairing)
    if sorted(pairing.tolist()) != list(range(n)):
        raise InvalidInputError("pairing must be a bijection")
    sims = cosine_matrix(he, ihc[pairing])
    paired = np.diag(sims).copy()
    shuffled = (sims.sum(axis=1) - paired) / (n - 1)
    return paired, shuffled, paired - shuffled


def summarize_alignment(paired, shuffled, n_boot=1000, seed=0, baseline=None):
    """Means with bootstrap CIs; ``baseline`` per-slide differences enable a Wilcoxon test."""
    diff = paired - shuffled
    report = AlignmentReport(
        n=len(paired),
        paired_mean=float(np.mean(paired)),
        paired_ci=mean_ci(paired, n_boot, seed),
        shuffled_mean=float(np.mean(shuffled)),
        shuffled_ci=mean_ci(shuffled, n_boot, seed),
        difference_mean=float(np.mean(diff)),
        difference_ci=mean_ci(diff, n_boot, seed),
        paired=paired,
        shuffled=shuffled,
        difference=diff,
    )
    if baseline is not None:
        report.wilcoxon_p = wilcoxon_signed_rank(diff, baseline)
    return report


def alignment_analysis(he, ihc, pairing=None, n_boot=1000, seed=0, baseline=None):
    paired, shuffled, _ = alignment_scores(he, ihc, pairing)
    return summarize_alignment(paired, shuffled, n_boot, seed, baseline)


# ---------------------------------------------------------------------------
# nested cross-validation


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    report: MetricReport
    slide_ids: list
    scores: np.ndarray
    labels: np.ndarray
    paired: np.ndarray | None = None
    shuffled: np.ndarray | None = None


@dataclass
class NestedEvalResult:
    mode: str
    folds: list
    pooled: MetricReport
    slide_ids: list
    scores: np.ndarray
    labels: np.ndarray
    alignment: AlignmentReport | None = None

    @property
    def confusion(self):
        return np.asarray(self.pooled.confusion)

    def as_dict(self):
        return {
            "mode": self.mode,
            "pooled": self.pooled.as_dict(),
            "folds": [
                {"fold": f.fold, "best_epoch": f.best_epoch, **f.report.as_dict()} for f in self.folds
            ],
            "predictions": [
                {"slide_id": s, "label": int(y), "score": float(p)}
                for s, y, p in zip(self.slide_ids, self.labels, self.scores)
            ],
            "alignment": None if self.alignment is None else self.alignment.as_dict(),
        }


def _he_matrix(slides, params):
    return embed_slides([s.he for s in slides], params)


def readout_scores(train, test, params, lam=1.0):
    """Fit the logistic readout on ``train`` H&E embeddings and score ``test``."""
    model = fit_logreg(_he_matrix(train, params), [s.label for s in train], lam=lam)
    return model.predict_proba(_he_matrix(test, params))


def _select_checkpoint(train, val, config, lam):
    """Train and keep the epoch whose validation weighted F1 is highest (earliest on ties)."""
    best = {"f1": -np.inf, "epoch": 0, "params": None}
    y_val = np.array([s.label for s in val])

    def on_epoch(epoch, state):
        scores = readout_scores(train, val, state.params, lam)
        f1 = weighted_f1(scores, y_val)
        if f1 > best["f1"]:
            best.update(f1=f1, epoch=epoch, params=state.params.copy())

    fit(train, config, on_epoch=on_epoch)
    return best["params"], best["epoch"]


def run_nested_eval(slides, config, k=5, seed=42, frozen=False, lam=1.0, n_boot=1000):
    """Nested CV over labeled paired slides.

    Per fold: train on the train split (unless ``frozen``), pick the checkpoint
    by validation weighted F1, fit the logistic readout on train-split H&E
    embeddings and score the test split. Test predictions are pooled across
    folds for the summary metrics and their bootstrap CIs.
    """
    slides = list(slides)
    for s in slides:
        if s.label not in (0, 1):
            raise InvalidInputError(f"slide {s.slide_id!r} lacks a 0/1 label")
    by_id = {s.slide_id: s for s in slides}
    folds = make_cv_folds(slides, k, seed)
    results = []
    for split in folds:
        try:
            pick = lambda ids: [by_id[i] for i in sorted(ids)]  # noqa: E731
            train, val, test = pick(split.train), pick(split.validation), pick(split.test)
            fold_cfg = config.with_(seed=derive_seed(config.seed, split.fold))
            if frozen:
                params = TrainState.initial(train[0].he.shape[1], fold_cfg).params
                epoch = 0
            else:
                params, epoch = _select_checkpoint(train, val, fold_cfg, lam)
            scores = readout_scores(train, test, params, lam)
            labels = np.array([s.label for s in test])
            report = score_metrics(scores, labels)
            fr = FoldResult(split.fold, epoch, report, [s.slide_id for s in test], scores, labels)
            if len(test) >= 2 and all(s.ihc is not None for s in test):
                he = _he_matrix(test, params)
                ihc = embed_slides([s.ihc for s in test], params)
                fr.paired, fr.shuffled, _ = alignment_scores(he, ihc)
            results.append(fr)
        except StainAlignError as exc:
            raise type(exc)(f"fold {split.fold}: {exc}") from exc
    scores = np.concatenate([r.scores for r in results])
    labels = np.concatenate([r.labels for r in results])
    ids = [i for r in results for i in r.slide_ids]
    pooled = score_metrics(scores, labels, n_boot=n_boot, seed=seed)
    alignment = None
    if all(r.paired is not None for r in results):
        alignment = summarize_alignment(
            np.concatenate([r.paired for r in results]),
            np.concatenate([r.shuffled for r in results]),
            n_boot=n_boot,
            seed=seed,
        )
    mode = "base" if frozen else config.mode
    return NestedEvalResult(mode, results, pooled, ids, scores, labels, alignment)


def compare_true_positives(result_a, result_b, selection="joint"):
    """Wilcoxon p-value on paired true-positive scores of two nested runs."""
    order_b = {s: i for i, s in enumerate(result_b.slide_ids)}
    idx = [order_b[s] for s in result_a.slide_ids]
    a, b = true_positive_scores(result_a.scores, result_b.scores[idx], result_a.labels, selection)
    if a.size == 0:
        raise UndefinedMetricError("no true positives shared by the two models")
    return wilcoxon_signed_rank(a, b), int(a.size)

