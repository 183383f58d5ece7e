"""Shared domain types and numeric conventions.

Everything numeric is float64. Feature tensors are (H, W, C) grids stored
row-major, so ``flatten`` enumerates (h, w, c) with the channel index moving
fastest. All types validate at construction and are immutable afterwards;
values can therefore be shared freely between workers without copying.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """A tensor disagrees with the declared (H, W, C) shape."""


def _readonly_f64(values, *, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


class FeatureGrid:
    """An immutable (H, W, C) feature tensor.

    The backing array is copied on construction and marked read-only, so a
    FeatureGrid never aliases caller-owned memory.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = _readonly_f64(data, name="feature grid")
        if arr.ndim != 3:
            raise ShapeError(f"expected a (H, W, C) tensor, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all feature dimensions must be >= 1, got {arr.shape}")
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    @property
    def size(self) -> int:
        return self._data.size

    def __repr__(self) -> str:
        return f"FeatureGrid(shape={self.shape})"


def flatten(feature: FeatureGrid) -> np.ndarray:
    """Row-major (h, w, c) flattening to a length H*W*C vector.

    Returns a read-only view; copy before mutating.
    """
    return feature.data.reshape(-1)


def unflatten(vector: np.ndarray, shape: tuple[int, int, int]) -> FeatureGrid:
    """Inverse of :func:`flatten` for a declared (H, W, C) shape."""
    vec = np.asarray(vector, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"expected a flat vector, got shape {vec.shape}")
    h, w, c = shape
    if vec.size != h * w * c:
        raise ShapeError(f"vector of length {vec.size} does not fill shape {shape}")
    return FeatureGrid(vec.reshape(h, w, c))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box as (x, y, w, h) with x,y the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"box field {name} is non-finite")
            object.__setattr__(self, name, float(v))
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive extent, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h


class ClassKind(Enum):
    BASE = "base"
    NOVEL = "novel"


@dataclass(frozen=True)
class ClassId:
    """Stable class identity; hashable so it can key proposal tables."""

    id: int
    kind: ClassKind

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or isinstance(self.id, bool) or self.id < 0:
            raise ValueError(f"class id must be a non-negative integer, got {self.id!r}")
        if not isinstance(self.kind, ClassKind):
            raise ValueError(f"kind must be a ClassKind, got {self.kind!r}")


class ClassPrototype:
    """A class node: identity, prototype feature, and how many supports built it."""

    __slots__ = ("class_id", "feature", "support_count")

    def __init__(self, class_id: ClassId, feature: FeatureGrid, support_count: int) -> None:
        if not isinstance(class_id, ClassId):
            raise ValueError("class_id must be a ClassId")
        if not isinstance(feature, FeatureGrid):
            raise ValueError("feature must be a FeatureGrid")
        if not isinstance(support_count, int) or isinstance(support_count, bool) or support_count < 1:
            raise ValueError(f"support_count must be an integer >= 1, got {support_count!r}")
        object.__setattr__(self, "class_id", class_id)
        object.__setattr__(self, "feature", feature)
        object.__setattr__(self, "support_count", support_count)

    def __setattr__(self, name, value) -> None:
        raise AttributeError("ClassPrototype is immutable")

    def with_feature(self, feature: FeatureGrid) -> "ClassPrototype":
        return ClassPrototype(self.class_id, feature, self.support_count)

    def __repr__(self) -> str:
        return f"ClassPrototype({self.class_id}, support_count={self.support_count})"


class ProposalNode:
    """A class-specific region proposal: box plus pooled feature."""

    __slots__ = ("box", "feature", "class_of")

    def __init__(self, box: BBox, feature: FeatureGrid, class_of: ClassId) -> None:
        if not isinstance(box, BBox):
            raise ValueError("box must be a BBox")
        if not isinstance(feature, FeatureGrid):
            raise ValueError("feature must be a FeatureGrid")
        if not isinstance(class_of, ClassId) or class_of.kind is not ClassKind.NOVEL:
            raise ValueError("proposals are generated per novel class; class_of must be a novel ClassId")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "feature", feature)
        object.__setattr__(self, "class_of", class_of)

    def __setattr__(self, name, value) -> None:
        raise AttributeError("ProposalNode is immutable")


@dataclass(frozen=True)
class Detection:
    class_id: ClassId
    box: BBox
    score: float

    def __post_init__(self) -> None:
        s = float(self.score)
        if not np.isfinite(s) or not 0.0 <= s <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")
        object.__setattr__(self, "score", s)


# Tolerance for boxes that were clipped to the image boundary and picked up
# one ulp of float dust in the process.
_BOUNDS_SLACK = 1e-9


class Episode:
    """One query scene plus the class table it is matched against.

    Construction validates every cross-reference: proposal features match the
    episode shape, proposal tables key only novel classes from the table,
    boxes lie inside the image, ground-truth classes exist. Proposal tables
    are reordered to novel-class table order so iteration is deterministic.
    """

    __slots__ = (
        "image_width",
        "image_height",
        "class_table",
        "proposals",
        "global_feature",
        "ground_truth",
        "shape",
    )

    def __init__(
        self,
        *,
        image_width: float,
        image_height: float,
        class_table: Sequence[ClassPrototype],
        proposals: Mapping[ClassId, Iterable[ProposalNode]],
        global_feature: FeatureGrid,
        ground_truth: Sequence[tuple[ClassId, BBox]] = (),
    ) -> None:
        iw, ih = float(image_width), float(image_height)
        if not (np.isfinite(iw) and np.isfinite(ih)) or iw <= 0 or ih <= 0:
            raise ValueError("image dimensions must be positive and finite")
        if not isinstance(global_feature, FeatureGrid):
            raise ValueError("global_feature must be a FeatureGrid")
        shape = global_feature.shape

        table = tuple(class_table)
        if not table:
            raise ValueError("class table must not be empty")
        seen: set[ClassId] = set()
        for proto in table:
            if not isinstance(proto, ClassPrototype):
                raise ValueError("class_table entries must be ClassPrototype")
            if proto.class_id in seen:
                raise ValueError(f"duplicate class id {proto.class_id} in class table")
            seen.add(proto.class_id)
            if proto.feature.shape != shape:
                raise ShapeError(
                    f"prototype for {proto.class_id} has shape {proto.feature.shape}, episode is {shape}"
                )

        novel_ids = [p.class_id for p in table if p.class_id.kind is ClassKind.NOVEL]
        for cid in proposals:
            if cid not in seen:
                raise ValueError(f"proposal table keys unknown class {cid}")
            if cid.kind is not ClassKind.NOVEL:
                raise ValueError(f"proposal table keys non-novel class {cid}")

        ordered: dict[ClassId, tuple[ProposalNode, ...]] = {}
        for cid in novel_ids:
            nodes = tuple(proposals.get(cid, ()))
            for idx, node in enumerate(nodes):
                if not isinstance(node, ProposalNode):
                    raise ValueError("proposal entries must be ProposalNode")
                if node.class_of != cid:
                    raise ValueError(f"proposal {idx} filed under {cid} claims class {node.class_of}")
                if node.feature.shape != shape:
                    raise ShapeError(
                        f"proposal {idx} of {cid} has feature shape {node.feature.shape}, episode is {shape}"
                    )
                self._check_box_in_image(node.box, iw, ih, f"proposal {idx} of {cid}")
            ordered[cid] = nodes

        gt = tuple((cid, box) for cid, box in ground_truth)
        for cid, box in gt:
            if cid not in seen:
                raise ValueError(f"ground truth references unknown class {cid}")
            if not isinstance(box, BBox):
                raise ValueError("ground truth boxes must be BBox")
            self._check_box_in_image(box, iw, ih, f"ground-truth box of {cid}")

        object.__setattr__(self, "image_width", iw)
        object.__setattr__(self, "image_height", ih)
        object.__setattr__(self, "class_table", table)
        object.__setattr__(self, "proposals", ordered)
        object.__setattr__(self, "global_feature", global_feature)
        object.__setattr__(self, "ground_truth", gt)
        object.__setattr__(self, "shape", shape)

    @staticmethod
    def _check_box_in_image(box: BBox, iw: float, ih: float, what: str) -> None:
        if box.x < -_BOUNDS_SLACK or box.y < -_BOUNDS_SLACK:
            raise ValueError(f"{what} starts outside the image: {box}")
        if box.x2 > iw + _BOUNDS_SLACK or box.y2 > ih + _BOUNDS_SLACK:
            raise ValueError(f"{what} extends past the image bounds: {box}")

    def __setattr__(self, name, value) -> None:
        raise AttributeError("Episode is immutable")

    @property
    def feature_dim(self) -> int:
        h, w, c = self.shape
        return h * w * c

    @property
    def novel_classes(self) -> tuple[ClassPrototype, ...]:
        return tuple(p for p in self.class_table if p.class_id.kind is ClassKind.NOVEL)

    @property
    def base_classes(self) -> tuple[ClassPrototype, ...]:
        return tuple(p for p in self.class_table if p.class_id.kind is ClassKind.BASE)

    def prototype_for(self, cid: ClassId) -> ClassPrototype:
        for proto in self.class_table:
            if proto.class_id == cid:
                return proto
        raise KeyError(cid)
