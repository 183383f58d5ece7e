"""Graph message passing over the class and proposal graphs.

Update rules, written for one layer with shared weight W (D x D):

* class-to-class, applied layers_inter times over the class graph:
  out_i = sum_j A[j, i] * f(c_j) + f(c_i). Note the transpose: rows of A are
  softmax-normalized, but node i aggregates with column i. No learnable
  weight participates, which keeps the support branch free of extra depth.
* proposal update: (cp_i * f(class) + sum_neighbors pp[i, j] * f(p_j)
  + pp[i, g] * f(global)) @ W + f(p_i).
* class update: (f(class) + sum_k cp_to_class[k] * f(p_k)) @ W + f(class).

Updates inside a layer are synchronous: both rules read the previous layer's
features. Edge weights are built once from the original features and held
fixed across layers. With layers_intra > 1 the proposal rule reads the class
feature produced by the previous layer's class update. Disabling an edge type
zeroes exactly its terms above; nothing else moves. W is applied exactly
layers_intra times on the proposal path and on the class path regardless of
toggles, which keeps both branches at equal learnable depth (mlp_mode swaps
every message for the node's own feature and keeps that property).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import ClassPrototype, FeatureGrid, ShapeError, flatten, unflatten
from .graph import InterClassGraph, IntraClassGraph


class CPDirection(Enum):
    """Which class-proposal directions stay enabled."""

    OFF = "off"
    CLASS_TO_PROPOSAL = "class-to-proposal"
    PROPOSAL_TO_CLASS = "proposal-to-class"
    BIDIRECTIONAL = "bidirectional"


class PPContext(Enum):
    """Which proposal-proposal context stays enabled."""

    OFF = "off"
    LOCAL_ONLY = "local"
    GLOBAL_ONLY = "global"
    BOTH = "both"


@dataclass(frozen=True)
class EdgeToggles:
    """Ablation switches for the three edge types plus the MLP fallback.

    mlp_mode forces every edge type off and replaces each node's message
    with the node's own feature (self edge only). base_memory_size of None
    means every base class in the episode table; an integer k keeps only the
    first k base classes in table order.
    """

    class_class: bool = True
    class_proposal: CPDirection = CPDirection.BIDIRECTIONAL
    proposal_proposal: PPContext = PPContext.BOTH
    mlp_mode: bool = False
    base_memory_size: int | None = None

    def __post_init__(self) -> None:
        if self.mlp_mode:
            object.__setattr__(self, "class_class", False)
            object.__setattr__(self, "class_proposal", CPDirection.OFF)
            object.__setattr__(self, "proposal_proposal", PPContext.OFF)
        if self.base_memory_size is not None:
            k = self.base_memory_size
            if not isinstance(k, int) or isinstance(k, bool) or k < 0:
                raise ValueError(f"base_memory_size must be None or an integer >= 0, got {k!r}")

    @property
    def enhancement_enabled(self) -> bool:
        return (
            self.mlp_mode
            or self.class_class
            or self.class_proposal is not CPDirection.OFF
            or self.proposal_proposal is not PPContext.OFF
        )

    @property
    def uses_class_to_proposal(self) -> bool:
        return self.class_proposal in (CPDirection.BIDIRECTIONAL, CPDirection.CLASS_TO_PROPOSAL)

    @property
    def uses_proposal_to_class(self) -> bool:
        return self.class_proposal in (CPDirection.BIDIRECTIONAL, CPDirection.PROPOSAL_TO_CLASS)

    @property
    def uses_local_context(self) -> bool:
        return self.proposal_proposal in (PPContext.BOTH, PPContext.LOCAL_ONLY)

    @property
    def uses_global_context(self) -> bool:
        return self.proposal_proposal in (PPContext.BOTH, PPContext.GLOBAL_ONLY)

    def label(self) -> str:
        """Compact text form used in CSV reports."""
        if not self.enhancement_enabled:
            return "none"
        if self.mlp_mode:
            return "mlp"
        mem = "all" if self.base_memory_size is None else str(self.base_memory_size)
        return (
            f"cc={'on' if self.class_class else 'off'}"
            f"|cp={self.class_proposal.value}"
            f"|pp={self.proposal_proposal.value}"
            f"|mem={mem}"
        )

    @classmethod
    def full(cls, base_memory_size: int | None = None) -> "EdgeToggles":
        return cls(base_memory_size=base_memory_size)

    @classmethod
    def none(cls) -> "EdgeToggles":
        return cls(class_class=False, class_proposal=CPDirection.OFF, proposal_proposal=PPContext.OFF)

    @classmethod
    def mlp(cls) -> "EdgeToggles":
        return cls(mlp_mode=True)

    @classmethod
    def class_class_only(cls) -> "EdgeToggles":
        return cls(class_proposal=CPDirection.OFF, proposal_proposal=PPContext.OFF)

    @classmethod
    def class_proposal_only(cls) -> "EdgeToggles":
        return cls(class_class=False, proposal_proposal=PPContext.OFF)

    @classmethod
    def proposal_proposal_only(cls) -> "EdgeToggles":
        return cls(class_class=False, class_proposal=CPDirection.OFF)


class GcnParams:
    """Shared layer weight plus layer counts for both passes."""

    __slots__ = ("weight", "layers_inter", "layers_intra")

    def __init__(self, weight: np.ndarray, layers_inter: int = 1, layers_intra: int = 1) -> None:
        w = np.array(weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"weight must be square (D, D), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weight contains non-finite values")
        if not (isinstance(layers_inter, int) and layers_inter >= 1):
            raise ValueError(f"layers_inter must be an integer >= 1, got {layers_inter!r}")
        if not (isinstance(layers_intra, int) and layers_intra >= 1):
            raise ValueError(f"layers_intra must be an integer >= 1, got {layers_intra!r}")
        w.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "layers_inter", layers_inter)
        object.__setattr__(self, "layers_intra", layers_intra)

    def __setattr__(self, name, value) -> None:
        raise AttributeError("GcnParams is immutable")

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def with_weight(self, weight: np.ndarray) -> "GcnParams":
        return GcnParams(weight, self.layers_inter, self.layers_intra)


@dataclass
class PassAudit:
    """Counts learnable-weight applications along each feature path."""

    proposal_w: int = 0
    prototype_w: int = 0
    inter_w: int = 0

    def merge(self, other: "PassAudit") -> None:
        self.proposal_w += other.proposal_w
        self.prototype_w += other.prototype_w
        self.inter_w += other.inter_w


def gcn_layer(features: np.ndarray, adjacency: np.ndarray, weight: np.ndarray | None = None) -> np.ndarray:
    """One generic residual layer: A @ X @ W + X (W omitted: A @ X + X)."""
    x = np.asarray(features, dtype=np.float64)
    a = np.asarray(adjacency, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (n, D), got {x.shape}")
    if a.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"adjacency shape {a.shape} does not match {x.shape[0]} nodes")
    msg = a @ x
    if weight is not None:
        w = np.asarray(weight, dtype=np.float64)
        if w.shape != (x.shape[1], x.shape[1]):
            raise ShapeError(f"weight shape {w.shape} does not match feature dim {x.shape[1]}")
        msg = msg @ w
    return msg + x


def smoothing_diagnostic(features: np.ndarray, adjacency: np.ndarray, layers: int) -> list[np.ndarray]:
    """Residual-free, weight-free stack: X_l = A @ X_{l-1}, all layers returned.

    Diagnostic only. With a row-stochastic non-negative adjacency every output
    node is a convex combination of input nodes, so the feature set's maximum
    pairwise distance cannot grow from layer to layer.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    a = np.asarray(adjacency, dtype=np.float64)
    if a.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"adjacency shape {a.shape} does not match {x.shape[0]} nodes")
    out = []
    for _ in range(layers):
        x = a @ x
        out.append(x)
    return out


def inter_class_pass(
    graph: InterClassGraph,
    layers: int = 1,
    audit: PassAudit | None = None,
) -> list[ClassPrototype]:
    """Enhance every prototype over the class graph; no learnable weight.

    Aggregation follows the transposed-index convention documented in the
    module docstring: out = A.T @ X + X, applied ``layers`` times with the
    adjacency held fixed.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    x = np.stack([flatten(p.feature) for p in graph.classes])
    at = graph.adjacency.T
    for _ in range(layers):
        x = at @ x + x
    shape = graph.classes[0].feature.shape
    if audit is not None:
        audit.inter_w += 0  # structurally no weight on this pass
    return [p.with_feature(unflatten(x[i], shape)) for i, p in enumerate(graph.classes)]


@dataclass
class IntraLayerState:
    """Forward state of one layer, saved for backpropagation."""

    x_in: np.ndarray
    c_in: np.ndarray
    msg_p: np.ndarray
    msg_c: np.ndarray


@dataclass
class IntraTrace:
    """Constants and per-layer states of one intra-class pass."""

    mlp_mode: bool
    use_cp: bool
    use_pc: bool
    use_local: bool
    use_global: bool
    local_weights: np.ndarray  # (N, N) receiver rows
    global_weights: np.ndarray  # (N,)
    cp_to_proposal: np.ndarray  # (N,)
    cp_to_class: np.ndarray  # (N,)
    global_feature: np.ndarray  # (D,)
    layers: list[IntraLayerState] = field(default_factory=list)
    x_out: np.ndarray | None = None
    c_out: np.ndarray | None = None


def _mlp_trace(x: np.ndarray, c: np.ndarray) -> IntraTrace:
    n, d = x.shape
    return IntraTrace(
        mlp_mode=True,
        use_cp=False,
        use_pc=False,
        use_local=False,
        use_global=False,
        local_weights=np.zeros((n, n)),
        global_weights=np.zeros(n),
        cp_to_proposal=np.zeros(n),
        cp_to_class=np.zeros(n),
        global_feature=np.zeros(d),
    )


def run_intra_layers(
    x: np.ndarray,
    c: np.ndarray,
    params: GcnParams,
    trace: IntraTrace,
    audit: PassAudit | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run layers_intra synchronous updates, appending per-layer state to trace."""
    w = params.weight
    for _ in range(params.layers_intra):
        if trace.mlp_mode:
            msg_p = x
            msg_c = c
        else:
            msg_p = np.zeros_like(x)
            if trace.use_cp:
                msg_p = msg_p + np.outer(trace.cp_to_proposal, c)
            if trace.use_local:
                msg_p = msg_p + trace.local_weights @ x
            if trace.use_global:
                msg_p = msg_p + np.outer(trace.global_weights, trace.global_feature)
            msg_c = c.copy()
            if trace.use_pc:
                msg_c = msg_c + trace.cp_to_class @ x
        trace.layers.append(IntraLayerState(x_in=x, c_in=c, msg_p=msg_p, msg_c=msg_c))
        x = msg_p @ w + x
        c = msg_c @ w + c
        if audit is not None:
            audit.proposal_w += 1
            audit.prototype_w += 1
    trace.x_out, trace.c_out = x, c
    return x, c


def intra_class_pass(
    graph: IntraClassGraph,
    enhanced_class: ClassPrototype,
    params: GcnParams,
    ablation: EdgeToggles = EdgeToggles(),
    audit: PassAudit | None = None,
    trace_out: list[IntraTrace] | None = None,
) -> tuple[list[FeatureGrid], ClassPrototype]:
    """Update the proposals and the class node of one intra-class graph.

    ``enhanced_class`` is the class feature after the class-graph pass (or the
    raw prototype when that pass is disabled). Returns the enhanced proposal
    features in graph order and the updated class prototype.
    """
    shape = enhanced_class.feature.shape
    if shape != graph.class_node.feature.shape:
        raise ShapeError("enhanced class shape differs from the graph's class node")
    d = int(np.prod(shape))
    if params.dim != d:
        raise ShapeError(f"weight is {params.dim}x{params.dim}, features have dim {d}")
    if enhanced_class.class_id != graph.class_node.class_id:
        raise ValueError("enhanced_class identity differs from the graph's class node")

    if ablation.mlp_mode:
        return mlp_class_pass(
            [p.feature for p in graph.proposals], enhanced_class, params, audit, trace_out
        )

    x = np.stack([flatten(p.feature) for p in graph.proposals])
    c = flatten(enhanced_class.feature).copy()
    n = graph.num_proposals
    trace = IntraTrace(
        mlp_mode=False,
        use_cp=ablation.uses_class_to_proposal,
        use_pc=ablation.uses_proposal_to_class,
        use_local=ablation.uses_local_context,
        use_global=ablation.uses_global_context,
        local_weights=graph.pp_weights[:n, :n],
        global_weights=graph.pp_weights[:n, n],
        cp_to_proposal=graph.cp_to_proposal,
        cp_to_class=graph.cp_to_class,
        global_feature=flatten(graph.global_node),
    )
    x, c = run_intra_layers(x, c, params, trace, audit)
    if trace_out is not None:
        trace_out.append(trace)

    features = [unflatten(x[i], shape) for i in range(n)]
    return features, enhanced_class.with_feature(unflatten(c, shape))


def mlp_class_pass(
    proposal_features: Sequence[FeatureGrid],
    class_proto: ClassPrototype,
    params: GcnParams,
    audit: PassAudit | None = None,
    trace_out: list[IntraTrace] | None = None,
) -> tuple[list[FeatureGrid], ClassPrototype]:
    """Self-edge update X @ W + X for one class and its proposals.

    Needs no graph; this is the mlp_mode route, and intra_class_pass
    delegates here so both entry points are bit-identical.
    """
    shape = class_proto.feature.shape
    d = int(np.prod(shape))
    if params.dim != d:
        raise ShapeError(f"weight is {params.dim}x{params.dim}, features have dim {d}")
    for i, f in enumerate(proposal_features):
        if f.shape != shape:
            raise ShapeError(f"proposal {i} has shape {f.shape}, expected {shape}")
    if proposal_features:
        x = np.stack([flatten(f) for f in proposal_features])
    else:
        x = np.zeros((0, d))
    c = flatten(class_proto.feature).copy()
    trace = _mlp_trace(x, c)
    x, c = run_intra_layers(x, c, params, trace, audit)
    if trace_out is not None:
        trace_out.append(trace)
    features = [unflatten(x[i], shape) for i in range(x.shape[0])]
    return features, class_proto.with_feature(unflatten(c, shape))
