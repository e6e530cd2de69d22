import numpy as np
import pytest

from stainalign.aggregator import AggregatorParams, aggregate_forward
from stainalign.encoding import EncoderSpec, encode_slide
from stainalign.errors import InvalidInputError
from stainalign.evaluation import alignment_scores
from stainalign.metrics import fit_logreg, roc_auc
from stainalign.rng import generator
from stainalign.synth import blob_mask, synth_embeddings, synth_images
from stainalign.tiling import StainProfile, build_tissue_mask, downsample, tile_image
from stainalign.trainer import TrainConfig, TrainState, fit


def test_embeddings_deterministic_and_shaped():
    a = synth_embeddings(n_pairs=10, d=16, seed=3)
    b = synth_embeddings(n_pairs=10, d=16, seed=3)
    for x, y in zip(a, b):
        assert x.he.tobytes() == y.he.tobytes() and x.ihc.tobytes() == y.ihc.tobytes()
        assert 4 <= len(x.he) <= 16 and x.he.shape == x.ihc.shape and x.he.shape[1] == 16
    assert sorted({s.label for s in a}) == [0, 1]
    assert sum(s.label for s in a) == 5


def test_embeddings_zero_noise_pairs_identical():
    slides = synth_embeddings(n_pairs=6, d=8, noise=0.0, ihc_signal=0.0, seed=1)
    p = AggregatorParams.init(8, 4, 8, seed=0)
    for s in slides:
        he, ihc = aggregate_forward(s.he, p), aggregate_forward(s.ihc, p)
        assert float(he.z_hat @ ihc.z_hat) == pytest.approx(1.0, abs=1e-12)


def test_embeddings_small_dimension_and_errors():
    assert synth_embeddings(n_pairs=2, d=2, seed=0)[0].he.shape[1] == 2
    with pytest.raises(InvalidInputError):
        synth_embeddings(n_pairs=1)
    with pytest.raises(InvalidInputError):
        synth_embeddings(d=1)


def test_full_training_raises_alignment():
    data = synth_embeddings(n_pairs=60, seed=42)
    cfg = TrainConfig(mode="full")

    def diff(params):
        he = np.stack([aggregate_forward(s.he, params).z for s in data])
        ihc = np.stack([aggregate_forward(s.ihc, params).z for s in data])
        return alignment_scores(he, ihc)[2].mean()

    before = diff(TrainState.initial(64, cfg).params)
    after = diff(fit(data, cfg).params)
    assert after - before >= 0.05


@pytest.fixture(scope="module")
def images():
    return synth_images(n_slides=60, seed=42, size=1024)


def test_images_deterministic_and_validated():
    a = synth_images(n_slides=2, seed=7, size=256)
    b = synth_images(n_slides=2, seed=7, size=256)
    for x, y in zip(a, b):
        assert x.he.tobytes() == y.he.tobytes() and x.ihc.tobytes() == y.ihc.tobytes()
        assert x.he.dtype == np.uint8 and x.he.shape == (256, 256, 3)
    with pytest.raises(InvalidInputError):
        synth_images(n_slides=1)


def test_blob_mask_on_lattice():
    m = blob_mask(1024, generator(1))
    cells = m.reshape(32, 32, 32, 32)
    assert np.all(cells.all(axis=(1, 3)) == cells.any(axis=(1, 3)))
    assert 0.05 < m.mean() < 0.8


def test_paired_masks_agree_and_cover_blobs(images):
    for pair in images[:10]:
        he = build_tissue_mask(downsample(pair.he), StainProfile.for_stain("he")).bits
        ihc = build_tissue_mask(downsample(pair.ihc), StainProfile.for_stain("ihc")).bits
        iou = (he & ihc).sum() / (he | ihc).sum()
        assert iou > 0.9
        truth = pair.tissue[::32, ::32]
        assert (he & truth).sum() / truth.sum() >= 0.95


def test_reference_encoder_separates_classes(images):
    spec = EncoderSpec(d=64, seed=42)
    X = []
    for pair in images:
        patches, _ = tile_image(pair.he, "he")
        X.append(np.mean([t.vector for t in encode_slide(patches, spec)], axis=0))
    X = np.asarray(X, dtype=np.float64)
    y = np.array([p.label for p in images])
    folds = np.arange(60) % 5
    scores = np.empty(60)
    for f in range(5):
        tr, te = folds != f, folds == f
        scores[te] = fit_logreg(X[tr], y[tr]).predict_proba(X[te])
    assert roc_auc(scores, y) > 0.9
