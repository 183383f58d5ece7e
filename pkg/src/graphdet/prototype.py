"""Support aggregation and query-feature modulation.

``average_supports`` builds the class prototype used everywhere else.
``spatial_avg_pool`` and ``modulate_query`` expose the attention-style
support/query coupling for callers that want it; the detection pipeline in
this package does not wire them in.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import FeatureGrid, ShapeError


def average_supports(supports: Sequence[FeatureGrid]) -> FeatureGrid:
    """Element-wise mean of K same-shape support features."""
    if not supports:
        raise ValueError("need at least one support feature")
    shape = supports[0].shape
    for i, s in enumerate(supports):
        if s.shape != shape:
            raise ShapeError(f"support {i} has shape {s.shape}, expected {shape}")
    stacked = np.stack([s.data for s in supports])
    return FeatureGrid(stacked.mean(axis=0))


def spatial_avg_pool(feature: FeatureGrid) -> np.ndarray:
    """Average over the spatial grid, leaving a length-C channel vector."""
    return feature.data.mean(axis=(0, 1))


def modulate_query(query: FeatureGrid, support: FeatureGrid) -> FeatureGrid:
    """Scale the query channel-wise by the support's pooled channel vector.

    Every spatial site of the query is multiplied by the same length-C
    vector, so the output shape equals the query shape.
    """
    if query.channels != support.channels:
        raise ShapeError(
            f"channel mismatch: query has {query.channels}, support has {support.channels}"
        )
    pooled = spatial_avg_pool(support)
    return FeatureGrid(query.data * pooled[None, None, :])
