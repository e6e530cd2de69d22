"""Reproducible random streams.

Every random quantity in the package is drawn from numpy's Philox4x64-10
bit generator, a counter-based generator keyed by a 64-bit seed. Sub-streams
are derived by hashing a tuple of integers through ``numpy.random.SeedSequence``
so that, e.g., the mask used for slide 3 of batch 2 in epoch 7 never depends on
how many draws happened before it.

Normal deviates use the Box-Muller transform on raw 64-bit words::

    u1 = ((w0 >> 11) + 1) * 2**-53        # in (0, 1]
    u2 = (w1 >> 11) * 2**-53              # in [0, 1)
    r = sqrt(-2 ln u1)
    z0, z1 = r cos(2 pi u2), r sin(2 pi u2)

Consecutive word pairs give consecutive deviate pairs, so the n-th deviate of a
stream is fixed by (seed, n) alone.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53


def derive_seed(*keys):
    """Hash a tuple of non-negative integers into one 64-bit seed."""
    words = [int(k) & _MASK64 for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def generator(seed, *keys):
    """Return a ``numpy.random.Generator`` over Philox keyed by ``seed``.

    Extra ``keys`` split the stream: ``generator(s, 1)`` and ``generator(s, 2)``
    are independent of each other and of ``generator(s)``.
    """
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


def normal_stream(seed, count):
    """First ``count`` standard-normal deviates of the Box-Muller stream for ``seed``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    n_pairs = (count + 1) // 2
    bits = np.random.Philox(key=int(seed) & _MASK64)
    raw = np.asarray(bits.random_raw(2 * n_pairs), dtype=np.uint64)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * n_pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]
