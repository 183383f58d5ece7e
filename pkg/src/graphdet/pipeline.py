"""End-to-end detection: enhance features, score pairs, regress boxes, NMS.

Flow for one episode under a given toggle configuration:

1. Build the class graph over (first k base classes + all novel classes) and
   run the class-to-class pass, unless that edge type is disabled.
2. Per novel class, build its proposal graph from the (possibly enhanced)
   prototype, the original proposal features, and the global scene node; run
   layers_intra synchronous updates. mlp_mode skips graph construction and
   applies the self-edge update instead. A class with zero proposals is left
   untouched and produces zero detections.
3. Score every proposal against its enhanced prototype with the match head,
   regress a box from the enhanced proposal feature, drop scores below the
   threshold, and run per-class NMS.

Classes with no enhancement at all (every toggle off) go straight to step 3
with raw features; no learnable transform runs on either branch in that case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ClassId,
    ClassKind,
    ClassPrototype,
    Detection,
    Episode,
    FeatureGrid,
    ShapeError,
    flatten,
)
from .gcn import (
    CPDirection,
    EdgeToggles,
    GcnParams,
    IntraTrace,
    PassAudit,
    PPContext,
    inter_class_pass,
    intra_class_pass,
    mlp_class_pass,
)
from .geometry import BoxDelta, apply_delta, nms
from .graph import DEFAULT_IOU_THETA, build_inter_class_graph, build_intra_class_graph, cosine

DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_NMS_IOU = 0.5

__all__ = [
    "CPDirection",
    "EdgeToggles",
    "EnhancedEpisode",
    "MatchHead",
    "PPContext",
    "cosine_matrix",
    "detect_episode",
    "enhance_episode",
    "match_score",
    "proposal_scores",
]


class MatchHead:
    """Pairwise matching head: sigmoid(scale * cosine + bias) plus a linear
    box regressor from the flattened proposal feature to a 4-vector delta."""

    __slots__ = ("scale", "bias", "regressor")

    def __init__(self, scale: float, bias: float, regressor: np.ndarray) -> None:
        s, b = float(scale), float(bias)
        if not (np.isfinite(s) and np.isfinite(b)):
            raise ValueError("scale and bias must be finite")
        r = np.array(regressor, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != 4:
            raise ShapeError(f"regressor must be (D, 4), got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("regressor contains non-finite values")
        r.flags.writeable = False
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "regressor", r)

    def __setattr__(self, name, value) -> None:
        raise AttributeError("MatchHead is immutable")

    @property
    def dim(self) -> int:
        return self.regressor.shape[0]

    def replace(self, scale: float | None = None, bias: float | None = None,
                regressor: np.ndarray | None = None) -> "MatchHead":
        return MatchHead(
            self.scale if scale is None else scale,
            self.bias if bias is None else bias,
            self.regressor if regressor is None else regressor,
        )


def sigmoid(z: float) -> float:
    # tanh form is stable in both tails
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def match_score(proposal_feature: FeatureGrid, class_feature: FeatureGrid, head: MatchHead) -> float:
    """Probability-like pair score in [0, 1]."""
    return float(sigmoid(head.scale * cosine(proposal_feature, class_feature) + head.bias))


@dataclass
class EnhancedEpisode:
    """Per-class enhanced features plus a record of the toggles that made them."""

    prototypes: dict[ClassId, FeatureGrid]
    proposal_features: dict[ClassId, tuple[FeatureGrid, ...]]
    toggles: EdgeToggles


def _select_memory(episode: Episode, toggles: EdgeToggles) -> list[ClassPrototype]:
    base = list(episode.base_classes)
    if toggles.base_memory_size is not None:
        base = base[: toggles.base_memory_size]
    return base


def enhance_episode(
    episode: Episode,
    params: GcnParams,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
    audit: PassAudit | None = None,
    traces: dict[ClassId, IntraTrace] | None = None,
) -> EnhancedEpisode:
    """Run the configured passes over one episode.

    ``traces`` (when given) captures per-class forward state for training.
    """
    novel = episode.novel_classes
    if params.dim != episode.feature_dim and toggles.enhancement_enabled:
        raise ShapeError(
            f"weight dim {params.dim} does not match episode feature dim {episode.feature_dim}"
        )

    if not toggles.enhancement_enabled:
        return EnhancedEpisode(
            prototypes={p.class_id: p.feature for p in novel},
            proposal_features={
                cid: tuple(node.feature for node in nodes)
                for cid, nodes in episode.proposals.items()
            },
            toggles=toggles,
        )

    prototypes: dict[ClassId, FeatureGrid] = {}
    proposal_features: dict[ClassId, tuple[FeatureGrid, ...]] = {}

    if toggles.mlp_mode:
        for proto in novel:
            nodes = episode.proposals.get(proto.class_id, ())
            if not nodes:
                prototypes[proto.class_id] = proto.feature
                proposal_features[proto.class_id] = ()
                continue
            trace_sink: list[IntraTrace] | None = [] if traces is not None else None
            feats, updated = mlp_class_pass(
                [n.feature for n in nodes], proto, params, audit, trace_sink
            )
            prototypes[proto.class_id] = updated.feature
            proposal_features[proto.class_id] = tuple(feats)
            if traces is not None and trace_sink:
                traces[proto.class_id] = trace_sink[0]
        return EnhancedEpisode(prototypes, proposal_features, toggles)

    table = _select_memory(episode, toggles) + list(novel)
    if toggles.class_class:
        inter = build_inter_class_graph(table)
        enhanced_table = inter_class_pass(inter, params.layers_inter, audit)
    else:
        enhanced_table = table
    enhanced_novel = {
        p.class_id: p for p in enhanced_table if p.class_id.kind is ClassKind.NOVEL
    }

    for proto in novel:
        cid = proto.class_id
        start = enhanced_novel[cid]
        nodes = episode.proposals.get(cid, ())
        if not nodes:
            prototypes[cid] = start.feature
            proposal_features[cid] = ()
            continue
        graph = build_intra_class_graph(start, nodes, episode.global_feature, theta)
        trace_sink = [] if traces is not None else None
        feats, updated = intra_class_pass(graph, start, params, toggles, audit, trace_sink)
        prototypes[cid] = updated.feature
        proposal_features[cid] = tuple(feats)
        if traces is not None and trace_sink:
            traces[cid] = trace_sink[0]
    return EnhancedEpisode(prototypes, proposal_features, toggles)


def proposal_scores(
    episode: Episode,
    params: GcnParams,
    head: MatchHead,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
) -> dict[ClassId, np.ndarray]:
    """Pre-threshold, pre-NMS match scores for every proposal of every class."""
    enhanced = enhance_episode(episode, params, toggles, theta)
    out: dict[ClassId, np.ndarray] = {}
    for cid, feats in enhanced.proposal_features.items():
        cfeat = enhanced.prototypes[cid]
        out[cid] = np.array([match_score(f, cfeat, head) for f in feats], dtype=np.float64)
    return out


def detect_episode(
    episode: Episode,
    params: GcnParams,
    head: MatchHead,
    toggles: EdgeToggles = EdgeToggles(),
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    nms_iou: float = DEFAULT_NMS_IOU,
    theta: float = DEFAULT_IOU_THETA,
    audit: PassAudit | None = None,
) -> list[Detection]:
    """Detect every novel class in one episode; see the module docstring."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must lie in [0, 1], got {score_threshold}")
    if head.dim != episode.feature_dim:
        raise ShapeError(
            f"head regressor dim {head.dim} does not match episode feature dim {episode.feature_dim}"
        )
    enhanced = enhance_episode(episode, params, toggles, theta, audit)
    bounds = (episode.image_width, episode.image_height)
    detections: list[Detection] = []
    for proto in episode.novel_classes:
        cid = proto.class_id
        nodes = episode.proposals.get(cid, ())
        feats = enhanced.proposal_features.get(cid, ())
        cfeat = enhanced.prototypes[cid]
        kept: list[Detection] = []
        for node, feat in zip(nodes, feats):
            score = match_score(feat, cfeat, head)
            if score < score_threshold:
                continue
            delta = BoxDelta(*(flatten(feat) @ head.regressor))
            box = apply_delta(node.box, delta, bounds)
            kept.append(Detection(class_id=cid, box=box, score=score))
        detections.extend(nms(kept, iou_threshold=nms_iou, per_class=True))
    return detections


def cosine_matrix(classes: Sequence[ClassPrototype]) -> np.ndarray:
    """Symmetric raw cosine similarities between class prototypes."""
    protos = list(classes)
    if not protos:
        raise ValueError("need at least one class prototype")
    n = len(protos)
    out = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            s = cosine(protos[i].feature, protos[j].feature)
            out[i, j] = out[j, i] = s
    for i in range(n):
        v = flatten(protos[i].feature)
        out[i, i] = 0.0 if float(np.linalg.norm(v)) == 0.0 else 1.0
    return out
