import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_differences
from stainalign.aggregator import (
    AggregatorParams,
    aggregate_forward,
    aggregate_gradients,
    embed_slides,
    mask_indices,
    mask_tiles,
    normalize_backward,
)
from stainalign.errors import InvalidInputError


def params(d=8, d_h=4, d_out=8, seed=0):
    return AggregatorParams.init(d, d_h, d_out, seed=seed)


def tiles(n, d=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def test_init_shapes_and_scale():
    p = AggregatorParams.init(64, 32, 64, seed=1)
    assert p.dims == (64, 32, 64)
    assert p.C.shape == (2, 64) and np.array_equal(p.b, [0, 0])
    assert abs(p.V.std() * np.sqrt(64) - 1) < 0.05
    assert np.array_equal(p.flat(), AggregatorParams.init(64, 32, 64, seed=1).flat())


def test_param_shape_validation():
    p = params()
    with pytest.raises(InvalidInputError):
        AggregatorParams(p.V, p.w[:2], p.U, p.C, p.b)
    with pytest.raises(InvalidInputError):
        AggregatorParams(p.V, p.w, p.U, p.C[:, :3], p.b)


def test_single_tile():
    p, h = params(), tiles(1)
    e = aggregate_forward(h, p)
    assert e.attention.tolist() == [1.0]
    np.testing.assert_allclose(e.z, p.U @ h[0], rtol=1e-12)


def test_two_identical_tiles():
    p, h = params(), tiles(1)
    e = aggregate_forward(np.vstack([h, h]), p)
    np.testing.assert_allclose(e.attention, [0.5, 0.5], rtol=1e-15)
    np.testing.assert_allclose(e.z, aggregate_forward(h, p).z, rtol=1e-12)


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_forward_invariants(n, seed):
    p, h = params(seed=seed), tiles(n, seed=seed)
    e = aggregate_forward(h, p)
    perm = np.random.default_rng(seed).permutation(n)
    np.testing.assert_allclose(aggregate_forward(h[perm], p).z, e.z, atol=1e-6)
    np.testing.assert_allclose(aggregate_forward(np.vstack([h, h]), p).z, e.z, atol=1e-6)
    assert np.all(e.attention >= 0) and abs(e.attention.sum() - 1) < 1e-6
    assert abs(np.linalg.norm(e.z_hat) - 1) < 1e-6


def test_forward_errors():
    with pytest.raises(InvalidInputError):
        aggregate_forward(np.empty((0, 8)), params())
    with pytest.raises(InvalidInputError):
        aggregate_forward(tiles(3, d=5), params())


def test_zero_upstream_gives_zero_gradients():
    g = aggregate_gradients(tiles(4), params(), np.zeros(8))
    assert not np.any(g.flat())


def test_du_outer_product_by_hand():
    p = params()
    h = tiles(2)
    e = aggregate_forward(h, p)
    dz = np.zeros(8)
    dz[3] = 2.0
    g = aggregate_gradients(h, p, dz)
    # dL/dU[3, 5] = dz[3] * p[5], p = a0 h0 + a1 h1
    pooled_5 = e.attention[0] * h[0, 5] + e.attention[1] * h[1, 5]
    assert g.U[3, 5] == pytest.approx(2.0 * pooled_5, rel=1e-12)
    assert not np.any(g.U[[0, 1, 2, 4, 5, 6, 7]])


def test_gradient_shape_mismatch():
    with pytest.raises(InvalidInputError):
        aggregate_gradients(tiles(3), params(), np.zeros(5))


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    p, h = params(seed=seed), tiles(6, seed=seed)
    dz = np.random.default_rng(seed + 100).normal(size=8)
    g = aggregate_gradients(h, p, dz)
    for name in ("V", "w", "U"):
        base = getattr(p, name)

        def f(x, name=name):
            q = p.copy()
            setattr(q, name, x.reshape(base.shape))
            return dz @ aggregate_forward(h, q).z

        num = central_differences(f, base.ravel()).reshape(base.shape)
        ana = getattr(g, name)
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        assert rel.max() < 1e-3, name


def test_normalize_backward_matches_differences():
    p, h = params(seed=3), tiles(4, seed=3)
    e = aggregate_forward(h, p)
    up = np.random.default_rng(0).normal(size=8)
    ana = normalize_backward(e, up)
    num = central_differences(lambda z: up @ (z / np.linalg.norm(z)), e.z)
    np.testing.assert_allclose(ana, num, rtol=1e-6, atol=1e-9)


def test_mask_examples():
    assert mask_indices(5, 0.0, 1).tolist() == [0, 1, 2, 3, 4]
    assert len(mask_indices(4, 0.5, 1)) == 2
    assert mask_indices(1, 0.9, 1).tolist() == [0]
    h = tiles(4)
    assert np.array_equal(mask_tiles(h, 0.0, 3), h)
    with pytest.raises(InvalidInputError):
        mask_indices(4, 1.0, 0)
    with pytest.raises(InvalidInputError):
        mask_indices(4, -0.1, 0)


@given(st.integers(1, 40), st.floats(0, 0.99), st.integers(0, 2**32))
def test_mask_properties(n, rate, seed):
    idx = mask_indices(n, rate, seed)
    k = max(1, int(np.floor((1 - rate) * n + 0.5)))
    assert len(idx) == min(k, n)
    assert np.all(np.diff(idx) > 0) and idx[0] >= 0 and idx[-1] < n
    assert np.array_equal(idx, mask_indices(n, rate, seed))
    lst = list(range(100, 100 + n))
    assert mask_tiles(lst, rate, seed) == [lst[i] for i in idx]


def test_embed_slides():
    p = params()
    sets = [tiles(3, seed=i) for i in range(4)]
    Z = embed_slides(sets, p)
    assert Z.shape == (4, 8)
    np.testing.assert_allclose(np.linalg.norm(embed_slides(sets, p, normalized=True), axis=1), 1.0)
