"""Average precision semantics and the ablation report harness."""

import csv

import numpy as np
import pytest

from conftest import base_id, grid, make_episode, node, novel_id, proto
from oracles import oracle_average_precision, oracle_dataset_average_precision
from graphdet.core import BBox, Detection
from graphdet.evaluation import (
    COCO_THRESHOLDS,
    EvalRun,
    ablation_report,
    average_precision,
    dataset_average_precision,
    dataset_metrics,
    write_report_csv,
)
from graphdet.gcn import EdgeToggles, GcnParams
from graphdet.pipeline import MatchHead


def det(cid, box, score):
    return Detection(class_id=cid, box=box, score=score)


CID = novel_id(1)
CID2 = novel_id(2)


def test_perfect_single_detection():
    gt = [(CID, BBox(10, 10, 20, 20))]
    dets = [det(CID, BBox(10, 10, 20, 20), 0.9)]
    assert average_precision(dets, gt) == 1.0


def test_false_positive_above_true_positive():
    gt = [(CID, BBox(10, 10, 20, 20))]
    dets = [
        det(CID, BBox(60, 60, 20, 20), 0.95),
        det(CID, BBox(10, 10, 20, 20), 0.80),
    ]
    # precision envelope is flat 1/2 over every recall point
    assert average_precision(dets, gt) == pytest.approx(0.5, abs=1e-12)


def test_recall_gap_truncates_interpolation():
    gt = [(CID, BBox(10, 10, 20, 20)), (CID, BBox(60, 60, 20, 20))]
    dets = [det(CID, BBox(10, 10, 20, 20), 0.9)]
    # one of two boxes found: recall points 0.00..0.50 score precision 1
    assert average_precision(dets, gt) == pytest.approx(51.0 / 101.0, abs=1e-12)


def test_duplicate_detection_is_false_positive():
    gt = [(CID, BBox(10, 10, 20, 20))]
    dets = [
        det(CID, BBox(10, 10, 20, 20), 0.9),
        det(CID, BBox(10.5, 10, 20, 20), 0.8),
    ]
    pooled = average_precision(dets, gt)
    only = average_precision(dets[:1], gt)
    assert only == 1.0
    assert pooled == 1.0  # the duplicate ranks below the hit, envelope unchanged


def test_tie_matches_earlier_ground_truth():
    # detection overlaps both boxes equally: list order decides the match
    gt = [(CID, BBox(0, 0, 10, 10)), (CID, BBox(10, 0, 10, 10))]
    spanning = BBox(5, 0, 10, 10)
    dets = [
        det(CID, spanning, 0.9),
        det(CID, BBox(0, 0, 10, 10), 0.8),
    ]
    pairs_ap = average_precision(dets, gt, iou_threshold=1.0 / 3.0)
    # spanning det takes the first box; the second det covers only box one,
    # already taken, so it is a false positive and recall stops at 0.5.
    # Had the tie matched box two instead, both dets would hit and AP were 1.
    assert pairs_ap == pytest.approx(51.0 / 101.0, abs=1e-12)


def test_iou_exactly_at_threshold_matches():
    gt = [(CID, BBox(0, 0, 10, 10))]
    half = BBox(0, 0, 10, 5)  # iou 0.5 with the square
    assert average_precision([det(CID, half, 0.9)], gt, iou_threshold=0.5) == 1.0


def test_unmatched_class_and_empty_inputs():
    gt = [(CID, BBox(0, 0, 10, 10)), (CID2, BBox(30, 30, 10, 10))]
    dets = [det(CID, BBox(0, 0, 10, 10), 0.9)]
    # class two has ground truth but no detections: its AP is 0, mean is 0.5
    assert average_precision(dets, gt) == pytest.approx(0.5, abs=1e-12)
    assert average_precision([], gt) == 0.0
    assert average_precision(dets, []) == 0.0
    with pytest.raises(ValueError):
        average_precision(dets, gt, iou_threshold=0.0)
    with pytest.raises(ValueError):
        average_precision(dets, gt, iou_threshold=1.0)


def _random_scene(rng, n_det, n_gt):
    gt = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 60, size=2)
        w, h = rng.uniform(10, 30, size=2)
        gt.append((CID, BBox(x, y, w, h)))
    dets = []
    for _ in range(n_det):
        if gt and rng.uniform() < 0.6:
            # perturbed copy of some ground-truth box, any overlap possible
            _, g = gt[int(rng.integers(len(gt)))]
            dx, dy = rng.uniform(-8, 8, size=2)
            box = BBox(max(g.x + dx, 0), max(g.y + dy, 0), g.w, g.h)
        else:
            x, y = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(10, 30, size=2)
            box = BBox(x, y, w, h)
        dets.append(det(CID, box, float(rng.uniform(0.01, 0.99))))
    return dets, gt


def test_scene_ap_matches_exhaustive_oracle(rng):
    for _ in range(40):
        dets, gt = _random_scene(rng, int(rng.integers(0, 6)), int(rng.integers(1, 4)))
        for thr in (0.3, 0.5, 0.75):
            got = average_precision(dets, gt, thr)
            want = oracle_average_precision(dets, gt, thr)
            assert got == pytest.approx(want, abs=1e-12)


def test_dataset_ap_matches_oracle_and_pools_globally(rng):
    scenes = [_random_scene(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4))) for _ in range(6)]
    got = dataset_average_precision(scenes, 0.5)
    want = oracle_dataset_average_precision(scenes, 0.5)
    assert got == pytest.approx(want, abs=1e-12)
    # pooling is not the mean of per-scene APs in general
    a = ([det(CID, BBox(0, 0, 10, 10), 0.9)], [(CID, BBox(0, 0, 10, 10))])
    b = (
        [det(CID, BBox(50, 50, 10, 10), 0.95), det(CID, BBox(20, 20, 10, 10), 0.5)],
        [(CID, BBox(20, 20, 10, 10))],
    )
    pooled = dataset_average_precision([a, b], 0.5)
    per_scene = np.mean([average_precision(*a), average_precision(*b)])
    assert pooled != pytest.approx(float(per_scene), abs=1e-6)
    assert dataset_average_precision([], 0.5) == 0.0


def test_matching_stays_per_scene(rng):
    # a detection cannot consume ground truth from another scene: two scenes
    # with one GT each and one detection each, both detections miss locally
    gt_box = BBox(0, 0, 10, 10)
    far = BBox(50, 50, 10, 10)
    s1 = ([det(CID, far, 0.9)], [(CID, gt_box)])
    s2 = ([det(CID, gt_box, 0.8)], [(CID, far)])
    assert dataset_average_precision([s1, s2], 0.5) == 0.0


def test_coco_thresholds_and_metrics(rng):
    assert len(COCO_THRESHOLDS) == 10
    assert COCO_THRESHOLDS[0] == 0.5
    assert COCO_THRESHOLDS[-1] == pytest.approx(0.95, abs=1e-12)
    scenes = [_random_scene(rng, 4, 2) for _ in range(4)]
    m = dataset_metrics(scenes)
    assert m.ap50 == dataset_average_precision(scenes, COCO_THRESHOLDS[0])
    assert m.ap75 == dataset_average_precision(scenes, COCO_THRESHOLDS[5])
    per = [dataset_average_precision(scenes, t) for t in COCO_THRESHOLDS]
    assert m.ap == pytest.approx(float(np.mean(per)), abs=1e-15)
    assert m.ap50 >= m.ap75


def _tiny_run(seed):
    cid = novel_id(1)
    ep = make_episode(
        protos=[proto(base_id(0), [0, 1, 0, 0]), proto(cid, [1, 0, 0, 0])],
        proposals={cid: [
            node(cid, BBox(10, 10, 20, 20), [2, 0.1 * seed, 0, 0]),
            node(cid, BBox(60, 60, 20, 20), [0, 0, 1, 0]),
        ]},
        ground_truth=[(cid, BBox(10, 10, 20, 20))],
    )
    return EvalRun(
        seed=seed, episodes=[ep],
        params=GcnParams(np.eye(4)),
        head=MatchHead(4.0, 0.0, np.zeros((4, 4))),
        shots=2,
    )


def test_ablation_report_layout(tmp_path):
    runs = [_tiny_run(0), _tiny_run(1)]
    grid_ = [EdgeToggles.none(), EdgeToggles.mlp()]
    rows = ablation_report(runs, grid_)
    # per toggle: one row per seed plus mean and std
    assert len(rows) == len(grid_) * (len(runs) + 2)
    assert [r.seed for r in rows[:4]] == ["0", "1", "mean", "std"]
    assert rows[0].toggles == "none" and rows[4].toggles == "mlp"
    mean_row = rows[2]
    assert mean_row.ap50 == pytest.approx((rows[0].ap50 + rows[1].ap50) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        ablation_report([], grid_)

    path = tmp_path / "report.csv"
    write_report_csv(rows, str(path))
    write_once = path.read_bytes()
    write_report_csv(rows, str(path))
    assert path.read_bytes() == write_once
    with open(path) as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0] == ["toggles", "shots", "seed", "ap", "ap50", "ap75"]
    assert len(parsed) == 1 + len(rows)
    assert float(parsed[1][4]) == rows[0].ap50
