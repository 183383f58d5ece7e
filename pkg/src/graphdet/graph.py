"""Affinity graph construction over class prototypes and proposals.

Two structures are built here. The class-to-class graph is fully connected
(self-pairs included) with each row of the adjacency softmax-normalized over
cosine similarities. The per-class proposal graph links proposals whose boxes
overlap above a strict IoU threshold, links every proposal to one global scene
node, and links the class node bidirectionally to all of its proposals.

Weight conventions, fixed here and consumed by the message-passing layers:

* pp_weights row i holds the incoming weights of receiving proposal i,
  softmax-normalized over that proposal's neighbor set (overlapping proposals
  plus the global node). The global node receives nothing; its row is zero.
* cp_to_proposal is the raw (unnormalized) cosine of class vs proposal, the
  weight of the class-to-proposal edge.
* cp_to_class is softmax-normalized over all of the class's proposals, the
  weights of the proposal-to-class edges.

Cosine similarity is taken over the full flattened (H, W, C) grid. A
zero-norm operand makes the similarity 0 by definition and raises a
ZeroNormWarning, because it almost always means an upstream bug.
"""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .core import ClassPrototype, FeatureGrid, ProposalNode, ShapeError, flatten
from .geometry import iou


class ZeroNormWarning(UserWarning):
    """A cosine operand had zero norm; similarity was defined as 0."""


DEFAULT_IOU_THETA = 0.7


def cosine(a: FeatureGrid, b: FeatureGrid) -> float:
    """Cosine similarity over flattened grids; zero-norm operands give 0."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine requires equal shapes, got {a.shape} vs {b.shape}")
    va, vb = flatten(a), flatten(b)
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm feature in cosine; similarity defined as 0", ZeroNormWarning)
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def softmax_normalize(scores: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D score vector (max is subtracted first)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError(f"expected a non-empty 1-D score vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    e = np.exp(s - s.max())
    return e / e.sum()


def _flat_matrix(features: Sequence[FeatureGrid]) -> np.ndarray:
    return np.stack([flatten(f) for f in features])


def _cosine_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Pairwise cosines between row sets; zero-norm rows/cols yield 0."""
    rn = np.linalg.norm(rows, axis=1)
    cn = np.linalg.norm(cols, axis=1)
    zero_r, zero_c = rn == 0.0, cn == 0.0
    if zero_r.any() or zero_c.any():
        warnings.warn("zero-norm feature in cosine; similarity defined as 0", ZeroNormWarning)
    sim = (rows / np.where(zero_r, 1.0, rn)[:, None]) @ (cols / np.where(zero_c, 1.0, cn)[:, None]).T
    sim[zero_r, :] = 0.0
    sim[:, zero_c] = 0.0
    return sim


class InterClassGraph:
    """Fully connected graph over class prototypes with row-softmax weights."""

    __slots__ = ("classes", "adjacency")

    def __init__(self, classes: tuple[ClassPrototype, ...], adjacency: np.ndarray) -> None:
        adjacency.flags.writeable = False
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "adjacency", adjacency)

    def __setattr__(self, name, value) -> None:
        raise AttributeError("InterClassGraph is immutable")


def build_inter_class_graph(classes: Sequence[ClassPrototype]) -> InterClassGraph:
    """Row-softmaxed cosine adjacency over every prototype pair, self included."""
    protos = tuple(classes)
    if not protos:
        raise ValueError("need at least one class prototype")
    shape = protos[0].feature.shape
    seen = set()
    for p in protos:
        if p.feature.shape != shape:
            raise ShapeError(f"prototype {p.class_id} has shape {p.feature.shape}, expected {shape}")
        if p.class_id in seen:
            raise ValueError(f"duplicate class id {p.class_id}")
        seen.add(p.class_id)
    feats = _flat_matrix([p.feature for p in protos])
    sims = _cosine_matrix(feats, feats)
    adjacency = np.empty_like(sims)
    for i in range(sims.shape[0]):
        adjacency[i] = softmax_normalize(sims[i])
    return InterClassGraph(protos, adjacency)


class IntraClassGraph:
    """One class node, one global scene node, and N class-specific proposals.

    The global node sits at index N of pp_weights (one past the proposals).
    """

    __slots__ = (
        "class_node",
        "proposals",
        "global_node",
        "pp_weights",
        "cp_to_proposal",
        "cp_to_class",
        "theta",
    )

    def __init__(
        self,
        class_node: ClassPrototype,
        proposals: tuple[ProposalNode, ...],
        global_node: FeatureGrid,
        pp_weights: np.ndarray,
        cp_to_proposal: np.ndarray,
        cp_to_class: np.ndarray,
        theta: float,
    ) -> None:
        for arr in (pp_weights, cp_to_proposal, cp_to_class):
            arr.flags.writeable = False
        object.__setattr__(self, "class_node", class_node)
        object.__setattr__(self, "proposals", proposals)
        object.__setattr__(self, "global_node", global_node)
        object.__setattr__(self, "pp_weights", pp_weights)
        object.__setattr__(self, "cp_to_proposal", cp_to_proposal)
        object.__setattr__(self, "cp_to_class", cp_to_class)
        object.__setattr__(self, "theta", theta)

    def __setattr__(self, name, value) -> None:
        raise AttributeError("IntraClassGraph is immutable")

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    @property
    def global_index(self) -> int:
        return len(self.proposals)


def build_intra_class_graph(
    class_node: ClassPrototype,
    proposals: Sequence[ProposalNode],
    global_feature: FeatureGrid,
    theta: float = DEFAULT_IOU_THETA,
) -> IntraClassGraph:
    """Build the per-class proposal graph.

    Proposal i's neighbor set is every other proposal j with
    iou(box_i, box_j) > theta, plus the global node; its incoming weights are
    the softmax of cosine similarities over exactly that set. The class node
    is connected to all N proposals in both directions (see module docstring
    for the weight conventions).
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie strictly inside (0, 1), got {theta}")
    nodes = tuple(proposals)
    if not nodes:
        raise ValueError("need at least one proposal")
    shape = class_node.feature.shape
    if global_feature.shape != shape:
        raise ShapeError(f"global feature shape {global_feature.shape} != class shape {shape}")
    for i, p in enumerate(nodes):
        if p.feature.shape != shape:
            raise ShapeError(f"proposal {i} has shape {p.feature.shape}, expected {shape}")
        if p.class_of != class_node.class_id:
            raise ValueError(f"proposal {i} belongs to {p.class_of}, graph is for {class_node.class_id}")

    n = len(nodes)
    feats = _flat_matrix([p.feature for p in nodes] + [global_feature])
    sims = _cosine_matrix(feats, feats)

    overlaps = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if iou(nodes[i].box, nodes[j].box) > theta:
                overlaps[i, j] = overlaps[j, i] = True

    pp = np.zeros((n + 1, n + 1), dtype=np.float64)
    for i in range(n):
        neighbors = [j for j in range(n) if overlaps[i, j]] + [n]
        weights = softmax_normalize(sims[i, neighbors])
        pp[i, neighbors] = weights

    class_flat = flatten(class_node.feature)
    cp_raw = _cosine_matrix(class_flat[None, :], feats[:n])[0]
    cp_to_class = softmax_normalize(cp_raw)

    return IntraClassGraph(
        class_node=class_node,
        proposals=nodes,
        global_node=global_feature,
        pp_weights=pp,
        cp_to_proposal=cp_raw.copy(),
        cp_to_class=cp_to_class,
        theta=float(theta),
    )
