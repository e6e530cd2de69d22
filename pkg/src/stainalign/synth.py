"""Synthetic paired H&E / IHC data.

``synth_embeddings`` skips rendering and emits tile embeddings directly;
``synth_images`` renders full-resolution paired RGB slides whose tissue
layout is shared between the two stains.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .rng import generator
from .trainer import PairedSlide


def _labels(n, balance, rng):
    n_pos = int(round(balance * n))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    return rng.permutation(labels)


def synth_embeddings(
    n_pairs=60,
    d=64,
    signal=3.0,
    noise=1.0,
    seed=42,
    balance=0.5,
    ihc_signal=5.0,
    informative=0.3,
    latent_dim=8,
    tile_range=(4, 16),
):
    """Paired tile-embedding sets with a shared per-slide latent.

    Each slide draws a latent ``mu = signal * (+/-1) * c + s`` (class direction
    ``c``, slide identity ``s``) that is written into a random subset of its
    tiles ("informative" tiles carry a marker direction); the remaining tiles
    hold unrelated content from the same subspace. Both stains see the same
    base tiles plus independent per-tile noise of scale ``noise``. IHC
    informative tiles also carry an extra class offset of size ``ihc_signal``,
    the complementary signal an H&E-only model cannot observe.
    """
    if n_pairs < 2:
        raise InvalidInputError("need at least 2 pairs")
    if d < 2:
        raise InvalidInputError("embedding dimension must be >= 2")
    rng = generator(seed)
    k = max(1, min(latent_dim, d - 2))
    n_dirs = min(d, k + 2)
    basis, _ = np.linalg.qr(rng.normal(size=(d, n_dirs)))
    # at d = 2 the marker and IHC directions coincide
    content, marker, ihc_dir = basis[:, :k], basis[:, min(k, n_dirs - 1)], basis[:, n_dirs - 1]
    class_dir = np.zeros(k)
    class_dir[0] = 1.0
    labels = _labels(n_pairs, balance, rng)

    slides = []
    lo, hi = tile_range
    for i, y in enumerate(labels):
        sign = 2.0 * y - 1.0
        mu = signal * sign * class_dir + rng.normal(size=k)
        n_tiles = int(rng.integers(lo, hi + 1))
        info = rng.random(n_tiles) < informative
        info[rng.integers(n_tiles)] = True
        base = rng.normal(size=(n_tiles, k)) @ content.T
        base[info] = content @ mu + marker
        he = base + noise * rng.normal(size=base.shape)
        ihc = base + noise * rng.normal(size=base.shape)
        ihc[info] += ihc_signal * sign * ihc_dir
        slides.append(
            PairedSlide(
                slide_id=f"s{i:03d}",
                patient_id=f"p{i:03d}",
                he=he.astype(np.float32),
                ihc=ihc.astype(np.float32),
                label=int(y),
            )
        )
    return slides


# ---------------------------------------------------------------------------
# image rendering

HE_PALETTE = {
    "background": (242, 240, 244),
    "stroma": (232, 150, 190),
    "nucleus": (92, 48, 140),
}
IHC_PALETTE = {
    "background": (244, 243, 240),
    "stroma": (170, 185, 215),
    "nucleus": (140, 82, 35),
}


@dataclass
class SlidePair:
    slide_id: str
    he: np.ndarray
    ihc: np.ndarray
    label: int
    tissue: np.ndarray  # boolean ground-truth blob mask


def blob_mask(size, rng, n_blobs=None, cell=32, smooth=5):
    """Union of random ellipses, rasterized on a ``cell``-pixel lattice.

    Snapping the layout to the mask-building lattice keeps the ground truth
    exact at mask resolution (no partially covered mask pixels). The lattice
    shape is then opened with a ``smooth`` x ``smooth`` square so staircase
    tips that the tissue mask's own opening would trim are not part of the
    ground truth.
    """
    n_cells = -(-size // cell)
    yy, xx = (np.mgrid[0:n_cells, 0:n_cells] + 0.5) * cell
    coarse = np.zeros((n_cells, n_cells), dtype=bool)
    n_blobs = n_blobs or int(rng.integers(2, 5))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        ry, rx = rng.uniform(0.15, 0.3, size=2) * size
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / rx
        v = (-(xx - cx) * s + (yy - cy) * c) / ry
        coarse |= u * u + v * v <= 1.0
    if smooth:
        from scipy import ndimage

        coarse = ndimage.binary_opening(coarse, structure=np.ones((smooth, smooth), bool), border_value=0)
    return np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:size, :size]


def _nuclei(size, density, rng, radius=4):
    """Boolean map of round dark spots; ``density`` is spots per 1000 px."""
    count = int(density * size * size / 1000)
    field = np.zeros((size, size), dtype=bool)
    ys = rng.integers(0, size, count)
    xs = rng.integers(0, size, count)
    field[ys, xs] = True
    if radius > 0:
        from scipy import ndimage

        r = radius
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        disk = yy * yy + xx * xx <= r * r
        field = ndimage.binary_dilation(field, structure=disk)
    return field


def _render(tissue, nuclei, palette, rng, jitter=6.0):
    size = tissue.shape[0]
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = palette["background"]
    img[tissue] = palette["stroma"]
    img[tissue & nuclei] = palette["nucleus"]
    img += rng.normal(scale=jitter, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_images(n_slides=60, balance=0.5, seed=42, size=1024, densities=(0.5, 4.0)):
    """Paired H&E-like / IHC-like RGB slides.

    Both stains share one blob layout and one nuclei field; the label sets the
    nuclei density (``densities[label]`` spots per 1000 px), i.e. how busy the
    tissue texture is.
    """
    if n_slides < 2:
        raise InvalidInputError("need at least 2 slides")
    rng = generator(seed)
    labels = _labels(n_slides, balance, rng)
    out = []
    for i, y in enumerate(labels):
        sub = generator(seed, i + 1)
        tissue = blob_mask(size, sub)
        nuclei = _nuclei(size, densities[int(y)], sub)
        he = _render(tissue, nuclei, HE_PALETTE, sub)
        ihc = _render(tissue, nuclei, IHC_PALETTE, sub)
        out.append(SlidePair(f"s{i:03d}", he, ihc, int(y), tissue))
    return out
