"""JSON persistence for episodes, checkpoints, and dataset manifests.

One document per file, always carrying ``format_version`` and ``kind``.
Floats are written with Python's shortest round-trip repr, so save/load is
bit-exact for float64. NaN and infinity are rejected on write and on read.

Error taxonomy: ``VersionMismatchError`` for unknown format versions,
``ShapeInconsistencyError`` when declared shapes and payload sizes disagree
(messages name the offending class / proposal index), ``MalformedDataError``
for everything else (bad JSON, missing keys, wrong types), each carrying the
file path and a location string.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import numpy as np

from .core import (
    BBox,
    ClassId,
    ClassKind,
    ClassPrototype,
    Episode,
    FeatureGrid,
    ProposalNode,
    unflatten,
)
from .gcn import GcnParams
from .pipeline import MatchHead

EPISODE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1


class FileFormatError(ValueError):
    """Base class for persistence errors; carries path and location."""

    def __init__(self, path: str, location: str, message: str) -> None:
        super().__init__(f"{path}: {location}: {message}")
        self.path = path
        self.location = location


class VersionMismatchError(FileFormatError):
    pass


class ShapeInconsistencyError(FileFormatError):
    pass


class MalformedDataError(FileFormatError):
    pass


def _dump(doc: Mapping[str, Any], path: str) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, allow_nan=False, separators=(",", ":"))
        fh.write("\n")


def _load(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh, parse_constant=_reject_constant)
    except OSError as exc:
        raise MalformedDataError(path, "<file>", f"cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedDataError(
            path, f"offset {exc.pos}", f"invalid JSON: {exc.msg}"
        ) from exc
    except ValueError as exc:  # parse_constant rejecting NaN / Infinity
        raise MalformedDataError(path, "<document>", str(exc)) from exc
    if not isinstance(doc, dict):
        raise MalformedDataError(path, "<root>", "document must be a JSON object")
    return doc


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name}")


def _require(doc: Mapping, key: str, path: str, location: str):
    if key not in doc:
        raise MalformedDataError(path, location, f"missing key '{key}'")
    return doc[key]


def _check_kind_version(doc: Mapping, kind: str, version: int, path: str) -> None:
    got_kind = _require(doc, "kind", path, "<root>")
    if got_kind != kind:
        raise MalformedDataError(path, "kind", f"expected '{kind}', got {got_kind!r}")
    got = _require(doc, "format_version", path, "<root>")
    if got != version:
        raise VersionMismatchError(
            path, "format_version", f"supported version is {version}, file has {got!r}"
        )


def _float_list(values, path: str, location: str) -> list[float]:
    if not isinstance(values, list):
        raise MalformedDataError(path, location, "expected a list of numbers")
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise MalformedDataError(path, f"{location}[{i}]", f"expected a number, got {v!r}")
        f = float(v)
        if not math.isfinite(f):
            raise MalformedDataError(path, f"{location}[{i}]", "non-finite number")
        out.append(f)
    return out


def _feature(values, shape: tuple[int, int, int], path: str, location: str) -> FeatureGrid:
    flat = _float_list(values, path, location)
    h, w, c = shape
    if len(flat) != h * w * c:
        raise ShapeInconsistencyError(
            path, location, f"expected {h * w * c} values for shape {list(shape)}, got {len(flat)}"
        )
    return unflatten(np.array(flat), shape)


def _box(values, path: str, location: str) -> BBox:
    flat = _float_list(values, path, location)
    if len(flat) != 4:
        raise MalformedDataError(path, location, f"a box needs 4 numbers, got {len(flat)}")
    try:
        return BBox(*flat)
    except ValueError as exc:
        raise MalformedDataError(path, location, str(exc)) from exc


_KINDS = {"base": ClassKind.BASE, "novel": ClassKind.NOVEL}


def _class_id(entry, path: str, location: str) -> ClassId:
    if not isinstance(entry, Mapping):
        raise MalformedDataError(path, location, "expected an object")
    raw_id = _require(entry, "id", path, location)
    raw_kind = _require(entry, "kind", path, location)
    if not isinstance(raw_id, int) or isinstance(raw_id, bool) or raw_id < 0:
        raise MalformedDataError(path, f"{location}.id", f"invalid class id {raw_id!r}")
    if raw_kind not in _KINDS:
        raise MalformedDataError(path, f"{location}.kind", f"invalid kind {raw_kind!r}")
    return ClassId(raw_id, _KINDS[raw_kind])


def write_episode(episode: Episode, path: str) -> None:
    doc = {
        "format_version": EPISODE_FORMAT_VERSION,
        "kind": "episode",
        "shape": list(episode.shape),
        "image_width": episode.image_width,
        "image_height": episode.image_height,
        "classes": [
            {
                "id": p.class_id.id,
                "kind": p.class_id.kind.value,
                "support_count": p.support_count,
                "feature": p.feature.data.reshape(-1).tolist(),
            }
            for p in episode.class_table
        ],
        "proposals": [
            {
                "class": {"id": cid.id, "kind": cid.kind.value},
                "items": [
                    {
                        "box": [n.box.x, n.box.y, n.box.w, n.box.h],
                        "feature": n.feature.data.reshape(-1).tolist(),
                    }
                    for n in nodes
                ],
            }
            for cid, nodes in episode.proposals.items()
        ],
        "global_feature": episode.global_feature.data.reshape(-1).tolist(),
        "ground_truth": [
            {
                "class": {"id": cid.id, "kind": cid.kind.value},
                "box": [b.x, b.y, b.w, b.h],
            }
            for cid, b in episode.ground_truth
        ],
    }
    _dump(doc, path)


def read_episode(path: str) -> Episode:
    doc = _load(path)
    _check_kind_version(doc, "episode", EPISODE_FORMAT_VERSION, path)
    raw_shape = _require(doc, "shape", path, "<root>")
    if (
        not isinstance(raw_shape, list)
        or len(raw_shape) != 3
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in raw_shape)
    ):
        raise MalformedDataError(path, "shape", f"expected [H, W, C] integers, got {raw_shape!r}")
    shape = (raw_shape[0], raw_shape[1], raw_shape[2])

    classes_raw = _require(doc, "classes", path, "<root>")
    if not isinstance(classes_raw, list):
        raise MalformedDataError(path, "classes", "expected a list")
    table = []
    for i, entry in enumerate(classes_raw):
        loc = f"classes[{i}]"
        cid = _class_id(entry, path, loc)
        count = _require(entry, "support_count", path, loc)
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise MalformedDataError(path, f"{loc}.support_count", f"invalid support count {count!r}")
        feature = _feature(_require(entry, "feature", path, loc), shape, path, f"{loc}.feature")
        table.append(ClassPrototype(cid, feature, count))

    proposals_raw = _require(doc, "proposals", path, "<root>")
    if not isinstance(proposals_raw, list):
        raise MalformedDataError(path, "proposals", "expected a list")
    proposals: dict[ClassId, list[ProposalNode]] = {}
    for i, group in enumerate(proposals_raw):
        loc = f"proposals[{i}]"
        if not isinstance(group, Mapping):
            raise MalformedDataError(path, loc, "expected an object")
        cid = _class_id(_require(group, "class", path, loc), path, f"{loc}.class")
        items = _require(group, "items", path, loc)
        if not isinstance(items, list):
            raise MalformedDataError(path, f"{loc}.items", "expected a list")
        nodes = []
        for j, item in enumerate(items):
            iloc = f"{loc}.items[{j}] (class {cid.id})"
            if not isinstance(item, Mapping):
                raise MalformedDataError(path, iloc, "expected an object")
            box = _box(_require(item, "box", path, iloc), path, f"{iloc}.box")
            feature = _feature(_require(item, "feature", path, iloc), shape, path, f"{iloc}.feature")
            try:
                nodes.append(ProposalNode(box, feature, cid))
            except ValueError as exc:
                raise MalformedDataError(path, iloc, str(exc)) from exc
        if cid in proposals:
            raise MalformedDataError(path, loc, f"duplicate proposal group for class {cid.id}")
        proposals[cid] = nodes

    gt_raw = doc.get("ground_truth", [])
    if not isinstance(gt_raw, list):
        raise MalformedDataError(path, "ground_truth", "expected a list")
    ground_truth = []
    for i, entry in enumerate(gt_raw):
        loc = f"ground_truth[{i}]"
        if not isinstance(entry, Mapping):
            raise MalformedDataError(path, loc, "expected an object")
        cid = _class_id(_require(entry, "class", path, loc), path, f"{loc}.class")
        box = _box(_require(entry, "box", path, loc), path, f"{loc}.box")
        ground_truth.append((cid, box))

    iw = _require(doc, "image_width", path, "<root>")
    ih = _require(doc, "image_height", path, "<root>")
    gfeat = _feature(_require(doc, "global_feature", path, "<root>"), shape, path, "global_feature")
    try:
        return Episode(
            image_width=iw,
            image_height=ih,
            class_table=table,
            proposals=proposals,
            global_feature=gfeat,
            ground_truth=ground_truth,
        )
    except ValueError as exc:
        raise MalformedDataError(path, "<episode>", str(exc)) from exc


@dataclass
class Checkpoint:
    params: GcnParams
    head: MatchHead
    shape: tuple[int, int, int]
    seed: int | None
    train_config: dict | None


def write_checkpoint(
    path: str,
    params: GcnParams,
    head: MatchHead,
    shape: tuple[int, int, int],
    seed: int | None = None,
    train_config: Mapping[str, Any] | None = None,
) -> None:
    h, w, c = shape
    if h * w * c != params.dim:
        raise ShapeInconsistencyError(
            path, "shape", f"shape {list(shape)} implies dim {h * w * c}, weight is {params.dim}"
        )
    if head.dim != params.dim:
        raise ShapeInconsistencyError(
            path, "head", f"regressor dim {head.dim} differs from weight dim {params.dim}"
        )
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "checkpoint",
        "shape": list(shape),
        "gcn": {
            "layers_inter": params.layers_inter,
            "layers_intra": params.layers_intra,
            "weight": [row.tolist() for row in params.weight],
        },
        "head": {
            "scale": head.scale,
            "bias": head.bias,
            "regressor": [row.tolist() for row in head.regressor],
        },
        "seed": seed,
        "train_config": dict(train_config) if train_config is not None else None,
    }
    _dump(doc, path)


def read_checkpoint(path: str) -> Checkpoint:
    doc = _load(path)
    _check_kind_version(doc, "checkpoint", CHECKPOINT_FORMAT_VERSION, path)
    raw_shape = _require(doc, "shape", path, "<root>")
    if (
        not isinstance(raw_shape, list)
        or len(raw_shape) != 3
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in raw_shape)
    ):
        raise MalformedDataError(path, "shape", f"expected [H, W, C] integers, got {raw_shape!r}")
    shape = (raw_shape[0], raw_shape[1], raw_shape[2])
    d = shape[0] * shape[1] * shape[2]

    gcn_raw = _require(doc, "gcn", path, "<root>")
    if not isinstance(gcn_raw, Mapping):
        raise MalformedDataError(path, "gcn", "expected an object")
    layers_inter = _require(gcn_raw, "layers_inter", path, "gcn")
    layers_intra = _require(gcn_raw, "layers_intra", path, "gcn")
    weight_raw = _require(gcn_raw, "weight", path, "gcn")
    if not isinstance(weight_raw, list) or len(weight_raw) != d:
        raise ShapeInconsistencyError(
            path, "gcn.weight", f"expected {d} rows for shape {list(shape)}"
        )
    rows = [_float_list(r, path, f"gcn.weight[{i}]") for i, r in enumerate(weight_raw)]
    for i, r in enumerate(rows):
        if len(r) != d:
            raise ShapeInconsistencyError(
                path, f"gcn.weight[{i}]", f"expected {d} columns, got {len(r)}"
            )
    try:
        params = GcnParams(np.array(rows), layers_inter, layers_intra)
    except ValueError as exc:
        raise MalformedDataError(path, "gcn", str(exc)) from exc

    head_raw = _require(doc, "head", path, "<root>")
    if not isinstance(head_raw, Mapping):
        raise MalformedDataError(path, "head", "expected an object")
    scale = _require(head_raw, "scale", path, "head")
    bias = _require(head_raw, "bias", path, "head")
    reg_raw = _require(head_raw, "regressor", path, "head")
    if not isinstance(reg_raw, list) or len(reg_raw) != d:
        raise ShapeInconsistencyError(
            path, "head.regressor", f"expected {d} rows for shape {list(shape)}"
        )
    reg_rows = [_float_list(r, path, f"head.regressor[{i}]") for i, r in enumerate(reg_raw)]
    for i, r in enumerate(reg_rows):
        if len(r) != 4:
            raise ShapeInconsistencyError(
                path, f"head.regressor[{i}]", f"expected 4 columns, got {len(r)}"
            )
    if isinstance(scale, bool) or isinstance(bias, bool) or not isinstance(scale, (int, float)) or not isinstance(bias, (int, float)):
        raise MalformedDataError(path, "head", "scale and bias must be numbers")
    try:
        head = MatchHead(float(scale), float(bias), np.array(reg_rows))
    except ValueError as exc:
        raise MalformedDataError(path, "head", str(exc)) from exc

    seed = doc.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool)):
        raise MalformedDataError(path, "seed", f"expected an integer or null, got {seed!r}")
    cfg = doc.get("train_config")
    if cfg is not None and not isinstance(cfg, dict):
        raise MalformedDataError(path, "train_config", "expected an object or null")
    return Checkpoint(params=params, head=head, shape=shape, seed=seed, train_config=cfg)


def check_shape_compatible(checkpoint: Checkpoint, episode: Episode, episode_path: str) -> None:
    """Refuse to pair a checkpoint with an episode of a different shape."""
    if tuple(checkpoint.shape) != tuple(episode.shape):
        raise ShapeInconsistencyError(
            episode_path,
            "shape",
            f"episode shape {list(episode.shape)} does not match checkpoint shape {list(checkpoint.shape)}",
        )


def write_manifest(path: str, config: Mapping[str, Any], episode_files: Iterable[str], split: str) -> None:
    doc = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "kind": "manifest",
        "split": split,
        "config": dict(config),
        "episodes": list(episode_files),
    }
    _dump(doc, path)


@dataclass
class Manifest:
    split: str
    config: dict
    episodes: list[str]
    directory: str

    def episode_paths(self) -> list[str]:
        return [os.path.join(self.directory, name) for name in self.episodes]


def read_manifest(path: str) -> Manifest:
    doc = _load(path)
    _check_kind_version(doc, "manifest", MANIFEST_FORMAT_VERSION, path)
    split = _require(doc, "split", path, "<root>")
    config = _require(doc, "config", path, "<root>")
    episodes = _require(doc, "episodes", path, "<root>")
    if split not in ("train", "eval"):
        raise MalformedDataError(path, "split", f"expected 'train' or 'eval', got {split!r}")
    if not isinstance(config, dict):
        raise MalformedDataError(path, "config", "expected an object")
    if not isinstance(episodes, list) or not all(isinstance(e, str) for e in episodes):
        raise MalformedDataError(path, "episodes", "expected a list of file names")
    return Manifest(split=split, config=config, episodes=episodes, directory=os.path.dirname(os.path.abspath(path)))
