"""Gated attention pooling of tile embeddings into a slide embedding.

Forward pass for tiles ``H`` (n x d)::

    s = tanh(H V^T) w          attention scores, length n
    a = softmax(s)
    p = a^T H                  pooled tile vector, length d
    z = U p                    slide embedding, length d_out
    z_hat = z / max(|z|, eps)

A 2-way classifier head ``C z + b`` sits on top of the unnormalized ``z``.
Everything is float64.
"""

from dataclasses import dataclass, fields

import numpy as np

from .encoding import stack
from .errors import InvalidInputError
from .rng import generator, normal_stream

EPS = 1e-8


@dataclass
class AggregatorParams:
    V: np.ndarray
    w: np.ndarray
    U: np.ndarray
    C: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        d_h, d = self.V.shape
        d_out = self.U.shape[0]
        if self.w.shape != (d_h,) or self.U.shape != (d_out, d):
            raise InvalidInputError("inconsistent aggregator shapes")
        if self.C.shape != (2, d_out) or self.b.shape != (2,):
            raise InvalidInputError("classifier head must be 2 x d_out with a length-2 bias")

    @property
    def dims(self):
        return self.V.shape[1], self.V.shape[0], self.U.shape[0]

    @classmethod
    def init(cls, d=64, d_h=32, d_out=64, seed=0):
        """Seeded normal entries scaled by 1/sqrt(fan-in); zero bias."""
        sizes = [d_h * d, d_h, d_out * d, 2 * d_out]
        z = normal_stream(seed, sum(sizes))
        V, w, U, C = np.split(z, np.cumsum(sizes)[:-1])
        return cls(
            V=V.reshape(d_h, d) / np.sqrt(d),
            w=w / np.sqrt(d_h),
            U=U.reshape(d_out, d) / np.sqrt(d),
            C=C.reshape(2, d_out) / np.sqrt(d_out),
            b=np.zeros(2),
        )

    @classmethod
    def zeros_like(cls, other):
        return cls(**{f.name: np.zeros_like(getattr(other, f.name)) for f in fields(other)})

    def copy(self):
        return AggregatorParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def flat(self):
        return np.concatenate([v.ravel() for _, v in self.items()])

    def with_flat(self, vec):
        out, i = {}, 0
        for name, v in self.items():
            out[name] = np.asarray(vec[i : i + v.size]).reshape(v.shape)
            i += v.size
        return AggregatorParams(**out)

    def add_(self, other, scale=1.0):
        for name, v in self.items():
            v += scale * getattr(other, name)
        return self

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for _, v in self.items())


@dataclass
class SlideEmbedding:
    z: np.ndarray
    z_hat: np.ndarray
    attention: np.ndarray
    pooled: np.ndarray
    # cached activations for the backward pass
    H: np.ndarray
    T: np.ndarray


def _softmax(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def aggregate_forward(tiles, params):
    H = stack(tiles)
    d_h, d = params.V.shape
    if H.shape[1] != d:
        raise InvalidInputError(f"tile dimension {H.shape[1]} does not match aggregator input {d}")
    T = np.tanh(H @ params.V.T)
    a = _softmax(T @ params.w)
    p = a @ H
    z = params.U @ p
    return SlideEmbedding(z=z, z_hat=z / max(np.linalg.norm(z), EPS), attention=a, pooled=p, H=H, T=T)


def normalize_backward(emb, d_zhat):
    """Map a gradient w.r.t. z_hat to one w.r.t. z."""
    n = np.linalg.norm(emb.z)
    if n <= EPS:
        return d_zhat / EPS
    return (d_zhat - emb.z_hat * (emb.z_hat @ d_zhat)) / n


def aggregate_gradients(tiles_or_emb, params, d_z):
    """Gradients of ``d_z . z`` w.r.t. V, w and U (C and b are left at zero).

    Accepts either a tile list or the ``SlideEmbedding`` from a previous
    forward call, which saves recomputation.
    """
    emb = tiles_or_emb if isinstance(tiles_or_emb, SlideEmbedding) else aggregate_forward(tiles_or_emb, params)
    d_z = np.asarray(d_z, dtype=np.float64)
    if d_z.shape != emb.z.shape:
        raise InvalidInputError(f"upstream gradient shape {d_z.shape} != {emb.z.shape}")
    grads = AggregatorParams.zeros_like(params)
    grads.U = np.outer(d_z, emb.pooled)
    d_p = params.U.T @ d_z
    d_a = emb.H @ d_p
    a = emb.attention
    d_s = a * (d_a - a @ d_a)
    grads.w = emb.T.T @ d_s
    d_pre = np.outer(d_s, params.w) * (1.0 - emb.T**2)
    grads.V = d_pre.T @ emb.H
    return grads


def mask_indices(n, rate=0.5, seed=0):
    """Indices kept after randomly dropping a fraction ``rate`` of ``n`` tiles.

    Keeps ``max(1, round_half_up((1 - rate) * n))`` tiles chosen uniformly
    without replacement, returned in ascending (original) order.
    """
    if not 0 <= rate < 1:
        raise InvalidInputError(f"mask rate must be in [0, 1), got {rate}")
    if n < 1:
        raise InvalidInputError("cannot mask an empty tile list")
    k = max(1, int(np.floor((1.0 - rate) * n + 0.5)))
    if k >= n:
        return np.arange(n)
    return np.sort(generator(seed).choice(n, size=k, replace=False))


def mask_tiles(tiles, rate=0.5, seed=0):
    """Randomly masked sub-sequence of ``tiles`` (list or (n, d) array)."""
    idx = mask_indices(len(tiles), rate, seed)
    if isinstance(tiles, np.ndarray):
        return tiles[idx]
    return [tiles[i] for i in idx]


def embed_slides(tile_sets, params, normalized=False):
    """Slide embeddings (rows) for a list of tile sets."""
    out = [aggregate_forward(t, params) for t in tile_sets]
    return np.stack([e.z_hat if normalized else e.z for e in out])
