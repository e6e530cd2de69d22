"""Tile encoders.

The reference encoder maps a patch to its per-channel 8-bin intensity
histogram (24 values) followed by a fixed Gaussian random projection. It stands
in for a pretrained foundation-model tile encoder; real embeddings can be
brought in through ``import_embeddings``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EmptySlideError, InvalidInputError
from .rng import normal_stream
from .tiling import PATCH_SIDE

N_BINS = 8
N_FEATURES = 3 * N_BINS


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "reference"
    d: int = 64
    seed: int | None = 42

    def __post_init__(self):
        if self.kind not in ("reference", "imported"):
            raise InvalidInputError(f"unknown encoder kind {self.kind!r}")
        if self.d < 2:
            raise InvalidInputError(f"embedding dimension must be >= 2, got {self.d}")
        if self.kind == "reference" and self.seed is None:
            raise InvalidInputError("reference encoder requires a seed")


@dataclass
class TileEmbedding:
    x: int
    y: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise InvalidInputError("tile vector must be one-dimensional")

    def __eq__(self, other):
        if not isinstance(other, TileEmbedding):
            return NotImplemented
        return (
            self.x == other.x
            and self.y == other.y
            and self.vector.tobytes() == other.vector.tobytes()
        )


@lru_cache(maxsize=16)
def _projection(seed, d):
    p = normal_stream(seed, d * N_FEATURES).reshape(d, N_FEATURES)
    p.setflags(write=False)
    return p


def projection_matrix(spec):
    """The d x 24 projection of the reference encoder (row-major draw order)."""
    return _projection(int(spec.seed), int(spec.d))


def histogram_features(patch):
    """Per-channel normalized 8-bin histograms, concatenated R, G, B."""
    patch = np.asarray(patch)
    pixels = patch.reshape(-1, 3)
    bins = (pixels >> 5).astype(np.intp)  # 32 gray levels per bin
    feats = np.empty(N_FEATURES)
    n = pixels.shape[0]
    for c in range(3):
        feats[c * N_BINS : (c + 1) * N_BINS] = np.bincount(bins[:, c], minlength=N_BINS) / n
    return feats


def encode_tile(patch, spec, side=PATCH_SIDE):
    if spec.kind != "reference":
        raise InvalidInputError("only the reference encoder can encode pixels")
    patch = np.asarray(patch)
    if patch.shape != (side, side, 3) or patch.dtype != np.uint8:
        raise InvalidInputError(
            f"expected a {side}x{side}x3 uint8 patch, got {patch.shape} {patch.dtype}"
        )
    return (projection_matrix(spec) @ histogram_features(patch)).astype(np.float32)


def encode_slide(patches, spec, side=PATCH_SIDE):
    """Encode ``(PatchRef, pixels)`` pairs in order, carrying their coordinates."""
    patches = list(patches)
    if not patches:
        raise EmptySlideError("slide has no tissue patches")
    return [TileEmbedding(ref.x, ref.y, encode_tile(px, spec, side)) for ref, px in patches]


def import_embeddings(path):
    """Read tile embeddings produced elsewhere (HSAE format)."""
    from .store import read_embeddings

    return read_embeddings(path)


def stack(tiles):
    """Tile list -> (n, d) float64 matrix."""
    if isinstance(tiles, np.ndarray):
        arr = np.asarray(tiles, dtype=np.float64)
    elif tiles:
        arr = np.stack([np.asarray(t.vector, dtype=np.float64) for t in tiles])
    else:
        arr = np.empty((0, 0))
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInputError("expected a non-empty (n, d) tile matrix")
    return arr
