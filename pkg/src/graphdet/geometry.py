"""Box arithmetic: overlap, suppression, and delta encoding.

Conventions: boxes are (x, y, w, h) with positive extent. Boxes that merely
touch along an edge or corner have intersection area 0 and therefore IoU 0.
Log-ratio delta components are clamped to |dw|, |dh| <= 10 so a downstream
exp() cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import BBox, Detection

DELTA_CLAMP = 10.0
_MIN_EXTENT = 1e-6


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; touching edges count as 0."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class BoxDelta:
    """Box offsets: center shifts in box-relative units, log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        for name in ("dx", "dy", "dw", "dh"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"delta field {name} is non-finite")
            object.__setattr__(self, name, v)
        # Clamp rather than reject: regressors can emit arbitrary magnitudes.
        object.__setattr__(self, "dw", min(max(self.dw, -DELTA_CLAMP), DELTA_CLAMP))
        object.__setattr__(self, "dh", min(max(self.dh, -DELTA_CLAMP), DELTA_CLAMP))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


def encode_delta(proposal: BBox, target: BBox) -> BoxDelta:
    """The delta that carries ``proposal`` onto ``target``."""
    return BoxDelta(
        dx=(target.cx - proposal.cx) / proposal.w,
        dy=(target.cy - proposal.cy) / proposal.h,
        dw=math.log(target.w / proposal.w),
        dh=math.log(target.h / proposal.h),
    )


def apply_delta(
    proposal: BBox,
    delta: BoxDelta,
    image_size: tuple[float, float] | None = None,
) -> BBox:
    """Apply a delta to a box; clip into the image when bounds are given."""
    cx = proposal.cx + delta.dx * proposal.w
    cy = proposal.cy + delta.dy * proposal.h
    w = proposal.w * math.exp(delta.dw)
    h = proposal.h * math.exp(delta.dh)
    x1, y1 = cx - 0.5 * w, cy - 0.5 * h
    x2, y2 = cx + 0.5 * w, cy + 0.5 * h
    if image_size is not None:
        iw, ih = image_size
        x1, x2 = min(max(x1, 0.0), iw), min(max(x2, 0.0), iw)
        y1, y2 = min(max(y1, 0.0), ih), min(max(y2, 0.0), ih)
        # A box clipped to nothing keeps a sliver so BBox stays valid.
        if x2 - x1 < _MIN_EXTENT:
            x1 = min(max(x1, 0.0), iw - _MIN_EXTENT)
            x2 = x1 + _MIN_EXTENT
        if y2 - y1 < _MIN_EXTENT:
            y1 = min(max(y1, 0.0), ih - _MIN_EXTENT)
            y2 = y1 + _MIN_EXTENT
    return BBox(x=x1, y=y1, w=x2 - x1, h=y2 - y1)


def _rank_key(d: Detection) -> tuple[float, float, float]:
    # Score descending, then top-left ascending: a total, deterministic order.
    return (-d.score, d.box.x, d.box.y)


def nms(
    detections: Sequence[Detection],
    iou_threshold: float = 0.5,
    per_class: bool = True,
) -> list[Detection]:
    """Greedy non-maximum suppression.

    Highest score wins; a detection is dropped when it overlaps an already
    kept detection above ``iou_threshold``. With ``per_class`` set (the
    default) suppression only happens between detections of the same class.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if per_class:
        groups: dict[object, list[Detection]] = {}
        for det in detections:
            groups.setdefault(det.class_id, []).append(det)
        kept: list[Detection] = []
        for group in groups.values():
            kept.extend(_nms_single(group, iou_threshold))
        kept.sort(key=_rank_key)
        return kept
    return _nms_single(list(detections), iou_threshold)


def _nms_single(group: list[Detection], iou_threshold: float) -> list[Detection]:
    group = sorted(group, key=_rank_key)
    kept: list[Detection] = []
    for det in group:
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept
