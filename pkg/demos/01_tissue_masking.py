"""Tissue masks and patch extraction on a synthetic slide pair."""

import numpy as np

from stainalign.synth import synth_images
from stainalign.tiling import (
    StainProfile,
    build_tissue_mask,
    downsample,
    gray_histogram,
    otsu_threshold,
    rgb_to_gray,
    tile_image,
)

# One paired slide: same blob layout, two palettes.
pair = synth_images(n_slides=2, seed=1, size=1024)[0]
print("slide", pair.slide_id, "label", pair.label, "image", pair.he.shape)

# Masks are built on a 32x downsampled copy.
small = downsample(pair.he, 32)
gray = rgb_to_gray(small)
t = otsu_threshold(gray_histogram(gray))
print("H&E Otsu threshold on the 32x32 thumbnail:", t)

# The IHC profile equalizes the histogram first.
he_mask = build_tissue_mask(small, StainProfile.for_stain("he"))
ihc_mask = build_tissue_mask(downsample(pair.ihc, 32), StainProfile.for_stain("ihc"))
iou = (he_mask.bits & ihc_mask.bits).sum() / (he_mask.bits | ihc_mask.bits).sum()
print("tissue fraction H&E %.3f, IHC %.3f, IoU %.3f" % (he_mask.bits.mean(), ihc_mask.bits.mean(), iou))

# ASCII view of the low-resolution mask
for row in he_mask.bits[::2]:
    print("".join("#" if v else "." for v in row[::1]))

# Full pipeline: mask, upsample by 32, keep 224px cells with >= 20% tissue.
patches, _ = tile_image(pair.he, "he")
print(len(patches), "patches kept")
for ref, px in patches[:5]:
    print("  x=%4d y=%4d coverage=%.3f mean rgb=%s" % (ref.x, ref.y, ref.coverage, px.reshape(-1, 3).mean(0).round(1)))

# A stricter coverage rule keeps fewer patches.
for cov in (0.2, 0.5, 0.9):
    print("min coverage %.1f ->" % cov, len(tile_image(pair.he, "he", min_coverage=cov)[0]), "patches")
