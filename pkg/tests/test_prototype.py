"""Support averaging and attention-style query modulation."""

import numpy as np
import pytest

import oracles
from graphdet.core import FeatureGrid, ShapeError
from graphdet.prototype import average_supports, modulate_query, spatial_avg_pool


def test_average_supports_is_elementwise_mean(rng):
    supports = [FeatureGrid(rng.normal(size=(2, 3, 4))) for _ in range(5)]
    got = average_supports(supports)
    want = oracles.mean_features(supports)
    assert np.allclose(np.asarray(oracles.vec(got)), np.asarray(want), atol=1e-12)


def test_average_single_support_is_identity(rng):
    s = FeatureGrid(rng.normal(size=(1, 2, 3)))
    assert np.array_equal(average_supports([s]).data, s.data)


def test_average_supports_validation():
    with pytest.raises(ValueError):
        average_supports([])
    a = FeatureGrid(np.zeros((1, 1, 2)))
    b = FeatureGrid(np.zeros((1, 1, 3)))
    with pytest.raises(ShapeError):
        average_supports([a, b])


def test_spatial_avg_pool_reduces_grid():
    data = np.arange(12, dtype=float).reshape(2, 2, 3)
    pooled = spatial_avg_pool(FeatureGrid(data))
    assert pooled.shape == (3,)
    assert pooled.tolist() == data.reshape(4, 3).mean(axis=0).tolist()


def test_modulate_query_scales_channels():
    query = FeatureGrid(np.ones((2, 2, 2)))
    support = FeatureGrid(np.stack([np.full((2, 2), 3.0), np.full((2, 2), 5.0)], axis=-1))
    out = modulate_query(query, support)
    assert out.shape == query.shape
    assert np.allclose(out.data[..., 0], 3.0)
    assert np.allclose(out.data[..., 1], 5.0)


def test_modulate_query_allows_different_spatial_sizes(rng):
    query = FeatureGrid(rng.normal(size=(3, 3, 2)))
    support = FeatureGrid(rng.normal(size=(1, 5, 2)))
    out = modulate_query(query, support)
    pooled = support.data.mean(axis=(0, 1))
    assert np.allclose(out.data, query.data * pooled[None, None, :], atol=1e-15)


def test_modulate_query_channel_mismatch():
    with pytest.raises(ShapeError):
        modulate_query(FeatureGrid(np.zeros((1, 1, 2))), FeatureGrid(np.zeros((1, 1, 3))))
