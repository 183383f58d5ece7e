"""Detection metrics and the ablation report harness.

Average precision follows the 101-point interpolation convention at every
threshold (including AP50): detections are ranked by score (ties broken by
top-left corner), matched greedily to the unmatched same-class ground-truth
box of highest overlap (ties by ground-truth list order), and the mean of the
interpolated precision envelope is taken over recalls {0.00, 0.01, ..., 1.00}.
The reported value averages over classes that have at least one ground-truth
box; a scene (or dataset) with no ground truth at all scores 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BBox, ClassId, Detection, Episode
from .gcn import EdgeToggles, GcnParams
from .geometry import iou
from .pipeline import MatchHead, detect_episode

COCO_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
_RECALL_POINTS = np.linspace(0.0, 1.0, 101)

GroundTruth = Sequence[tuple[ClassId, BBox]]


def _det_order(d: Detection) -> tuple[float, float, float]:
    return (-d.score, d.box.x, d.box.y)


def _match_scene(
    detections: Sequence[Detection],
    ground_truth: GroundTruth,
    threshold: float,
) -> dict[ClassId, tuple[list[tuple[float, bool]], int]]:
    """Per class: score-ordered (score, is_true_positive) pairs and GT count."""
    gts: dict[ClassId, list[BBox]] = {}
    for cid, box in ground_truth:
        gts.setdefault(cid, []).append(box)
    out: dict[ClassId, tuple[list[tuple[float, bool]], int]] = {}
    for cid, boxes in gts.items():
        dets = sorted((d for d in detections if d.class_id == cid), key=_det_order)
        taken = [False] * len(boxes)
        pairs: list[tuple[float, bool]] = []
        for det in dets:
            best_iou, best_j = threshold, -1
            for j, g in enumerate(boxes):
                if taken[j]:
                    continue
                v = iou(det.box, g)
                if v >= best_iou and (best_j == -1 or v > best_iou):
                    best_iou, best_j = v, j
            if best_j >= 0:
                taken[best_j] = True
                pairs.append((det.score, True))
            else:
                pairs.append((det.score, False))
        out[cid] = (pairs, len(boxes))
    return out


def _ap_from_pairs(pairs: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """101-point interpolated AP from ranked (score, tp) pairs."""
    if n_gt == 0:
        raise ValueError("AP is undefined for a class with no ground truth")
    if not pairs:
        return 0.0
    flags = np.array([tp for _, tp in pairs], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros_like(_RECALL_POINTS)
    for k, r in enumerate(_RECALL_POINTS):
        idx = np.searchsorted(recall, r, side="left")
        if idx < envelope.size:
            interp[k] = envelope[idx]
    return float(interp.mean())


def average_precision(
    detections: Sequence[Detection],
    ground_truth: GroundTruth,
    iou_threshold: float = 0.5,
) -> float:
    """Mean AP over the classes present in the ground truth of one scene."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    per_class = _match_scene(detections, ground_truth, iou_threshold)
    if not per_class:
        return 0.0
    values = [_ap_from_pairs(pairs, n_gt) for pairs, n_gt in per_class.values()]
    return float(np.mean(values))


def dataset_average_precision(
    scenes: Sequence[tuple[Sequence[Detection], GroundTruth]],
    iou_threshold: float = 0.5,
) -> float:
    """AP pooled over many scenes: matches stay per scene, ranking is global."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    pooled: dict[ClassId, list[tuple[float, bool]]] = {}
    counts: dict[ClassId, int] = {}
    for detections, ground_truth in scenes:
        for cid, (pairs, n_gt) in _match_scene(detections, ground_truth, iou_threshold).items():
            pooled.setdefault(cid, []).extend(pairs)
            counts[cid] = counts.get(cid, 0) + n_gt
    if not pooled:
        return 0.0
    values = []
    for cid, pairs in pooled.items():
        pairs.sort(key=lambda p: -p[0])
        values.append(_ap_from_pairs(pairs, counts[cid]))
    return float(np.mean(values))


@dataclass
class Metrics:
    ap: float  # mean over the ten 0.50:0.05:0.95 thresholds
    ap50: float
    ap75: float


def dataset_metrics(scenes: Sequence[tuple[Sequence[Detection], GroundTruth]]) -> Metrics:
    per_threshold = [dataset_average_precision(scenes, t) for t in COCO_THRESHOLDS]
    return Metrics(
        ap=float(np.mean(per_threshold)),
        ap50=per_threshold[0],
        ap75=per_threshold[5],
    )


@dataclass
class EvalRun:
    """One evaluated world: a seed label, its episodes, and trained parameters."""

    seed: int
    episodes: Sequence[Episode]
    params: GcnParams
    head: MatchHead
    shots: int


@dataclass
class ReportRow:
    toggles: str
    shots: int
    seed: str  # seed number, or "mean" / "std"
    ap: float
    ap50: float
    ap75: float


def ablation_report(
    runs: Sequence[EvalRun],
    toggle_grid: Sequence[EdgeToggles],
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
    theta: float = 0.7,
) -> list[ReportRow]:
    """Evaluate every toggle configuration on every run.

    Emits one row per (toggle, seed) in grid-major order, followed by a mean
    and a std row per toggle. Output order is fixed by the input order, so
    rewriting the same report is byte-stable.
    """
    if not runs:
        raise ValueError("need at least one run")
    rows: list[ReportRow] = []
    for toggles in toggle_grid:
        label = toggles.label()
        per_seed: list[Metrics] = []
        for run in runs:
            scenes = []
            for ep in run.episodes:
                dets = detect_episode(
                    ep, run.params, run.head, toggles,
                    score_threshold=score_threshold, nms_iou=nms_iou, theta=theta,
                )
                scenes.append((dets, ep.ground_truth))
            m = dataset_metrics(scenes)
            per_seed.append(m)
            rows.append(ReportRow(label, run.shots, str(run.seed), m.ap, m.ap50, m.ap75))
        arr = np.array([[m.ap, m.ap50, m.ap75] for m in per_seed])
        mean, std = arr.mean(axis=0), arr.std(axis=0)
        rows.append(ReportRow(label, runs[0].shots, "mean", *mean.tolist()))
        rows.append(ReportRow(label, runs[0].shots, "std", *std.tolist()))
    return rows


def write_report_csv(rows: Iterable[ReportRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["toggles", "shots", "seed", "ap", "ap50", "ap75"])
        for row in rows:
            writer.writerow([row.toggles, row.shots, row.seed,
                             repr(row.ap), repr(row.ap50), repr(row.ap75)])
