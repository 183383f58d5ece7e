"""Shared test builders: tiny hand-made episodes with controllable features."""

from __future__ import annotations

import numpy as np
import pytest

from graphdet.core import (
    BBox,
    ClassId,
    ClassKind,
    ClassPrototype,
    Episode,
    FeatureGrid,
    ProposalNode,
)

DATA_DIR = __file__.rsplit("/", 1)[0] + "/data"


def grid(values, shape=(1, 1, 4)) -> FeatureGrid:
    """FeatureGrid from a flat list, default shape (1, 1, 4)."""
    h, w, c = shape
    return FeatureGrid(np.asarray(values, dtype=np.float64).reshape(h, w, c))


def base_id(i: int) -> ClassId:
    return ClassId(i, ClassKind.BASE)


def novel_id(i: int) -> ClassId:
    return ClassId(i, ClassKind.NOVEL)


def proto(cid: ClassId, values, shape=(1, 1, 4), support_count: int = 1) -> ClassPrototype:
    return ClassPrototype(cid, grid(values, shape), support_count)


def node(cid: ClassId, box: BBox, values, shape=(1, 1, 4)) -> ProposalNode:
    return ProposalNode(box, grid(values, shape), cid)


def make_episode(
    *,
    protos=None,
    proposals=None,
    global_values=(0.0, 0.0, 0.0, 1.0),
    ground_truth=(),
    shape=(1, 1, 4),
    image=(100.0, 100.0),
) -> Episode:
    """A small hand-built episode; defaults give one base and one novel class."""
    if protos is None:
        protos = [
            proto(base_id(0), [1.0, 0.0, 0.0, 0.0], shape),
            proto(novel_id(1), [0.0, 1.0, 0.0, 0.0], shape),
        ]
    if proposals is None:
        nv = [p.class_id for p in protos if p.class_id.kind is ClassKind.NOVEL]
        proposals = {}
        if nv:
            proposals = {
                nv[0]: [
                    node(nv[0], BBox(10, 10, 20, 20), [0.0, 1.0, 0.0, 0.0], shape),
                    node(nv[0], BBox(50, 50, 20, 20), [1.0, 0.0, 0.0, 0.0], shape),
                ]
            }
    return Episode(
        image_width=image[0],
        image_height=image[1],
        class_table=protos,
        proposals=proposals,
        global_feature=grid(global_values, shape),
        ground_truth=ground_truth,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(7)
