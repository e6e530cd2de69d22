"""Attention pooling, the three losses, and a finite-difference check."""

import numpy as np

from stainalign.aggregator import AggregatorParams, aggregate_forward, mask_tiles
from stainalign.losses import (
    LossConfig,
    PairedBatch,
    class_loss,
    grad_check,
    inter_modality_loss,
    intra_modality_loss,
    total_loss,
)

rng = np.random.default_rng(0)
params = AggregatorParams.init(d=8, d_h=4, d_out=8, seed=1)
tiles = rng.normal(size=(6, 8))

emb = aggregate_forward(tiles, params)
print("attention", emb.attention.round(3), "sum", emb.attention.sum())
print("|z| = %.3f, |z_hat| = %.3f" % (np.linalg.norm(emb.z), np.linalg.norm(emb.z_hat)))

# Shuffling tiles does not change the slide embedding.
print("order-free:", np.allclose(aggregate_forward(tiles[::-1], params).z, emb.z))

# Half of the tiles are dropped for the masked branch.
masked = mask_tiles(tiles, 0.5, seed=7)
print("masked branch keeps", len(masked), "of", len(tiles), "tiles")

# Contrastive loss on two orthogonal pairs at tau = 1: log(1 + e^-1)
E = np.eye(2)
print("inter, orthogonal pairs:", inter_modality_loss(E, E, 1.0)[0], np.log1p(np.exp(-1)))
print("inter, identical rows:", inter_modality_loss(np.ones((3, 2)) / np.sqrt(2), np.ones((3, 2)) / np.sqrt(2), 0.07)[0], np.log(3))
print("intra:", intra_modality_loss([[1.0, 0.0]], [[0.0, 0.0]])[0])
print("class, logits (10, -10):", class_loss(np.array([[10.0, -10.0]]), [0])[0])

# Sum of the terms and an end-to-end gradient check.
he = [rng.normal(size=(n, 8)) for n in (3, 5, 2)]
ihc = [rng.normal(size=(n, 8)) for n in (4, 4, 6)]
keep = [np.array([0, 2]), np.array([1, 3]), np.array([1])]
batch = PairedBatch(he, ihc, keep, np.array([0, 1, 1]))
for mode in ("full", "ssl", "finetune"):
    cfg = LossConfig(tau=0.07, mode=mode)
    terms, _ = total_loss(batch, params, cfg)
    print(mode, {k: round(v, 4) for k, v in terms.as_dict().items()}, "grad check %.1e" % grad_check(batch, params, cfg))
