"""Tissue masking and non-overlapping patch extraction.

Images are plain ``uint8`` numpy arrays shaped ``(height, width)`` for gray or
``(height, width, 3)`` for RGB. Masks carry their downsample factor relative to
level 0 so patch coordinates can always be expressed at full resolution.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, InvalidInputError

log = logging.getLogger(__name__)

PATCH_SIDE = 224
MIN_COVERAGE = 0.2
DOWNSAMPLE = 32


@dataclass
class TissueMask:
    bits: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise InvalidInputError("mask must be two-dimensional")
        if int(self.scale) < 1:
            raise InvalidInputError(f"mask scale must be >= 1, got {self.scale}")
        self.scale = int(self.scale)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TissueMask):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class StainProfile:
    """Per-stain masking recipe.

    ``tissue_below`` selects the polarity: tissue is ``gray <= threshold``.
    """

    kind: str
    equalize: bool
    kernel: int = 5
    tissue_below: bool = True

    def __post_init__(self):
        if self.kind not in ("he", "ihc"):
            raise InvalidInputError(f"unknown stain kind {self.kind!r}")
        if self.kernel not in (3, 5, 7):
            raise InvalidInputError(f"kernel side must be 3, 5 or 7, got {self.kernel}")

    @classmethod
    def for_stain(cls, kind, kernel=5):
        kind = kind.lower()
        # equalization only in the IHC pipeline
        return cls(kind=kind, equalize=(kind == "ihc"), kernel=kernel)


@dataclass(frozen=True)
class PatchRef:
    x: int
    y: int
    side: int = PATCH_SIDE
    coverage: float = field(default=1.0, compare=False)


def _check_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected an RGB image (H, W, 3), got shape {image.shape}")
    if image.dtype != np.uint8:
        raise InvalidInputError(f"expected uint8 pixels, got {image.dtype}")
    return image


def rgb_to_gray(image):
    """Rec.601 luma, rounded half-up and clamped to 0..255."""
    image = _check_rgb(image).astype(np.float64)
    gray = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    return np.clip(np.floor(gray + 0.5), 0, 255).astype(np.uint8)


def gray_histogram(gray):
    return np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.int64)


def otsu_threshold(histogram):
    """Smallest threshold ``t`` maximizing between-class variance of {<=t} vs {>t}.

    Scores are compared exactly in integer arithmetic: with ``n0``/``s0`` the
    count and intensity sum at or below ``t`` and ``N``/``S`` the totals, the
    variance is proportional to ``(N*s0 - n0*S)**2 / (n0 * (N - n0))``.
    """
    hist = [int(c) for c in np.asarray(histogram).ravel()]
    if len(hist) != 256:
        raise InvalidInputError(f"histogram must have 256 bins, got {len(hist)}")
    if any(c < 0 for c in hist):
        raise InvalidInputError("histogram counts must be non-negative")
    total = sum(hist)
    if total == 0:
        raise DegenerateInputError("histogram is empty")
    nonzero = [v for v, c in enumerate(hist) if c]
    if len(nonzero) == 1:
        return nonzero[0]

    intensity_sum = sum(v * c for v, c in enumerate(hist))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        if n0 == 0 or n0 == total:
            continue
        num = (total * s0 - n0 * intensity_sum) ** 2
        den = n0 * (total - n0)
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def equalize_histogram(gray):
    """Global histogram equalization via the cumulative distribution."""
    gray = np.asarray(gray, dtype=np.uint8)
    hist = gray_histogram(gray)
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.nonzero(hist)[0][0]] if cdf[-1] else 0
    denom = cdf[-1] - cdf_min
    if denom == 0:
        return gray.copy()
    lut = np.floor((cdf - cdf_min) * 255.0 / denom + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[gray]


def _check_kernel(kernel):
    if kernel < 3 or kernel % 2 == 0:
        raise InvalidInputError(f"kernel side must be odd and >= 3, got {kernel}")
    return np.ones((kernel, kernel), dtype=bool)


def erode(bits, kernel):
    return ndimage.binary_erosion(bits, structure=_check_kernel(kernel), border_value=0)


def dilate(bits, kernel):
    return ndimage.binary_dilation(bits, structure=_check_kernel(kernel), border_value=0)


def morphology(mask, op, kernel=5):
    """Binary opening or closing with a square element; out-of-image pixels are false."""
    _check_kernel(kernel)
    if op == "open":
        bits = dilate(erode(mask.bits, kernel), kernel)
    elif op == "close":
        bits = erode(dilate(mask.bits, kernel), kernel)
    else:
        raise InvalidInputError(f"unknown morphology op {op!r}")
    return TissueMask(bits, mask.scale)


def build_tissue_mask(image, profile, scale=DOWNSAMPLE):
    """Tissue mask of a downsampled RGB image.

    gray -> optional equalization -> Otsu -> polarity -> open -> close. An image
    whose gray levels are all identical has no tissue/background split; it
    yields an all-false mask and a warning.
    """
    gray = rgb_to_gray(image)
    if profile.equalize:
        gray = equalize_histogram(gray)
    hist = gray_histogram(gray)
    if np.count_nonzero(hist) <= 1:
        log.warning("no tissue/background contrast; returning an empty mask")
        return TissueMask(np.zeros(gray.shape, dtype=bool), scale)
    t = otsu_threshold(hist)
    bits = gray <= t if profile.tissue_below else gray > t
    mask = TissueMask(bits, scale)
    mask = morphology(mask, "open", profile.kernel)
    return morphology(mask, "close", profile.kernel)


def downsample(image, factor=DOWNSAMPLE):
    """Area-average downsample; partial edge blocks average their valid pixels."""
    image = np.asarray(image)
    if factor < 1:
        raise InvalidInputError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    rows = np.arange(0, h, factor)
    cols = np.arange(0, w, factor)
    data = image.astype(np.float64)
    sums = np.add.reduceat(np.add.reduceat(data, rows, axis=0), cols, axis=1)
    rh = np.diff(np.append(rows, h))
    cw = np.diff(np.append(cols, w))
    counts = np.outer(rh, cw)
    if data.ndim == 3:
        counts = counts[..., None]
    return np.clip(np.floor(sums / counts + 0.5), 0, 255).astype(np.uint8)


def upsample_mask(mask, factor):
    """Nearest-neighbour replication of every mask pixel into a factor x factor block."""
    if factor < 1:
        raise InvalidInputError(f"upsample factor must be >= 1, got {factor}")
    if mask.scale % factor:
        raise InvalidInputError(f"cannot upsample a scale-{mask.scale} mask by {factor}")
    bits = np.repeat(np.repeat(mask.bits, factor, axis=0), factor, axis=1)
    return TissueMask(bits, mask.scale // factor)


def coverage_threshold(min_coverage, side):
    """Minimum count of tissue pixels: ceil(min_coverage * side**2), computed exactly."""
    if not 0 < min_coverage <= 1:
        raise InvalidInputError(f"min_coverage must be in (0, 1], got {min_coverage}")
    frac = Fraction(str(min_coverage)) if isinstance(min_coverage, float) else Fraction(min_coverage)
    return math.ceil(frac * side * side)


def extract_patches(image, mask, side=PATCH_SIDE, min_coverage=MIN_COVERAGE):
    """Non-overlapping ``side`` x ``side`` patches whose footprint is tissue-covered.

    Returns ``(PatchRef, pixels)`` pairs in row-major (y, x) order. The mask is
    at level-0 scale and is cropped to the image when larger.
    """
    image = np.asarray(image)
    if mask.scale != 1:
        raise InvalidInputError(f"mask must be at level-0 scale, got scale {mask.scale}")
    h, w = image.shape[:2]
    if mask.height < h or mask.width < w:
        raise InvalidInputError(
            f"mask {mask.width}x{mask.height} smaller than image {w}x{h}"
        )
    need = coverage_threshold(min_coverage, side)
    ny, nx = h // side, w // side
    if ny == 0 or nx == 0:
        return []
    bits = mask.bits[: ny * side, : nx * side]
    counts = bits.reshape(ny, side, nx, side).sum(axis=(1, 3))
    area = side * side
    out = []
    for j, i in zip(*np.nonzero(counts >= need)):
        x, y = int(i) * side, int(j) * side
        ref = PatchRef(x, y, side, float(counts[j, i]) / area)
        out.append((ref, image[y : y + side, x : x + side]))
    return out


def tile_image(image, stain, side=PATCH_SIDE, min_coverage=MIN_COVERAGE, factor=DOWNSAMPLE, kernel=5):
    """Full pipeline on a level-0 RGB image; returns (patches, low-resolution mask)."""
    image = _check_rgb(image)
    profile = stain if isinstance(stain, StainProfile) else StainProfile.for_stain(stain, kernel)
    small = downsample(image, factor)
    mask = build_tissue_mask(small, profile, scale=factor)
    full = upsample_mask(mask, factor)
    return extract_patches(image, full, side, min_coverage), mask


def write_pgm(mask, path):
    """Write a mask as binary PGM (P5) with 0/255 pixels."""
    pixels = np.where(mask.bits, 255, 0).astype(np.uint8)
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())
