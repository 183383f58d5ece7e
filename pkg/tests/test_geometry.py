"""Box arithmetic: IoU, delta codec, NMS."""

import math

import numpy as np
import pytest

import oracles
from conftest import novel_id
from graphdet.core import BBox, Detection
from graphdet.geometry import DELTA_CLAMP, BoxDelta, apply_delta, encode_delta, iou, nms


def test_iou_hand_cases():
    a = BBox(0, 0, 2, 2)
    assert iou(a, BBox(0, 0, 2, 2)) == 1.0
    assert iou(a, BBox(5, 5, 2, 2)) == 0.0
    # touching along an edge counts as zero overlap
    assert iou(a, BBox(2, 0, 2, 2)) == 0.0
    # 1x2 strip shared between two 2x2 boxes: 2 / (4 + 4 - 2)
    assert iou(a, BBox(1, 0, 2, 2)) == pytest.approx(1.0 / 3.0, abs=1e-15)
    # containment: 1x1 inside 2x2
    assert iou(a, BBox(0.5, 0.5, 1, 1)) == pytest.approx(0.25, abs=1e-15)


def test_iou_matches_reference_on_random_boxes(rng):
    for _ in range(200):
        x1, y1, x2, y2 = rng.uniform(0, 50, size=4)
        a = BBox(x1, y1, x2 + 0.5, y2 + 0.5)
        x1, y1, x2, y2 = rng.uniform(0, 50, size=4)
        b = BBox(x1, y1, x2 + 0.5, y2 + 0.5)
        assert iou(a, b) == pytest.approx(oracles.iou(a, b), abs=1e-12)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


def test_delta_roundtrip(rng):
    for _ in range(100):
        px, py = rng.uniform(0, 50, size=2)
        pw, ph = rng.uniform(1, 30, size=2)
        tx, ty = rng.uniform(0, 50, size=2)
        tw, th = rng.uniform(1, 30, size=2)
        prop, target = BBox(px, py, pw, ph), BBox(tx, ty, tw, th)
        out = apply_delta(prop, encode_delta(prop, target))
        assert out.x == pytest.approx(target.x, abs=1e-9)
        assert out.y == pytest.approx(target.y, abs=1e-9)
        assert out.w == pytest.approx(target.w, abs=1e-9)
        assert out.h == pytest.approx(target.h, abs=1e-9)


def test_delta_identity_is_zero():
    b = BBox(3, 4, 10, 12)
    d = encode_delta(b, b)
    assert d.as_tuple() == (0.0, 0.0, 0.0, 0.0)
    assert apply_delta(b, d) == b


def test_delta_clamps_log_ratios():
    d = BoxDelta(dx=0, dy=0, dw=50.0, dh=-50.0)
    assert d.dw == DELTA_CLAMP and d.dh == -DELTA_CLAMP
    with pytest.raises(ValueError):
        BoxDelta(dx=math.nan, dy=0, dw=0, dh=0)


def test_apply_delta_clips_to_image():
    b = BBox(90, 90, 8, 8)
    out = apply_delta(b, BoxDelta(dx=5, dy=5, dw=0, dh=0), image_size=(100.0, 100.0))
    assert out.x2 <= 100.0 and out.y2 <= 100.0
    assert out.w > 0 and out.h > 0
    # box pushed fully past the edge keeps a sliver inside the image
    far = apply_delta(b, BoxDelta(dx=100, dy=100, dw=0, dh=0), image_size=(100.0, 100.0))
    assert far.x2 <= 100.0 and far.w > 0


def _det(score, x=0.0, y=0.0, w=10.0, h=10.0, cid=0):
    return Detection(novel_id(cid), BBox(x, y, w, h), score)


def test_nms_keeps_highest_and_drops_overlaps():
    dets = [_det(0.9, x=0), _det(0.8, x=1), _det(0.7, x=40)]
    kept = nms(dets, iou_threshold=0.5)
    assert [d.score for d in kept] == [0.9, 0.7]


def test_nms_boundary_overlap_is_kept():
    # IoU exactly at the threshold is not suppressed (strictly-above rule)
    a = BBox(0, 0, 2, 2)
    b = BBox(1, 0, 2, 2)
    thr = iou(a, b)
    dets = [Detection(novel_id(0), a, 0.9), Detection(novel_id(0), b, 0.8)]
    assert len(nms(dets, iou_threshold=thr)) == 2
    assert len(nms(dets, iou_threshold=thr - 1e-9)) == 1


def test_nms_is_class_aware():
    dets = [_det(0.9, cid=0), _det(0.8, cid=1)]
    assert len(nms(dets, iou_threshold=0.5)) == 2
    assert len(nms(dets, iou_threshold=0.5, per_class=False)) == 1


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], iou_threshold=0.0)
    with pytest.raises(ValueError):
        nms([], iou_threshold=1.0)


def test_nms_matches_reference_on_random_scenes(rng):
    for trial in range(30):
        dets = []
        scores = rng.permutation(np.linspace(0.05, 0.95, 12))  # distinct scores
        for k in range(12):
            x, y = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(5, 25, size=2)
            dets.append(_det(float(scores[k]), x=x, y=y, w=w, h=h, cid=int(k % 3)))
        got = nms(dets, iou_threshold=0.4)
        want = oracles.oracle_nms(dets, 0.4)
        assert [(d.score, d.class_id) for d in got] == [(d.score, d.class_id) for d in want]
