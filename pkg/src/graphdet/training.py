"""Episodic training of the shared layer weight and the match head.

The loss over one episode is mean binary cross-entropy over all labeled
proposals plus ``regression_weight`` (default 1) times the mean smooth-L1
over positive proposals, where a proposal is positive when its best IoU with
a same-class ground-truth box reaches ``positive_iou``.

Gradients are analytic for (W, scale, bias, regressor). Edge weights are
treated as constants (they are built from pre-update features and carry no
parameters), while the cosine inside the match score is differentiated. The
finite-difference path below recomputes the same forward under central
perturbations and is the independent check on the analytic code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import ClassId, ClassKind, Episode, ShapeError, flatten
from .gcn import (
    EdgeToggles,
    GcnParams,
    IntraTrace,
    _mlp_trace,
    inter_class_pass,
    run_intra_layers,
)
from .geometry import BoxDelta, encode_delta, iou
from .graph import DEFAULT_IOU_THETA, build_inter_class_graph, build_intra_class_graph
from .pipeline import MatchHead, _select_memory


class TrainingDiverged(RuntimeError):
    """The loss left the finite range during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_episodes: int = 4
    iterations: int = 1000
    lr_decay_at: int | None = None
    positive_iou: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr_decay_at is not None and self.lr_decay_at < 0:
            raise ValueError("lr_decay_at must be None or >= 0")
        if not 0.0 < self.positive_iou < 1.0:
            raise ValueError(f"positive_iou must lie in (0, 1), got {self.positive_iou}")


@dataclass(frozen=True)
class LabeledProposal:
    class_id: ClassId
    proposal_index: int
    positive: bool
    target: BoxDelta | None = None

    def __post_init__(self) -> None:
        if self.positive and self.target is None:
            raise ValueError("positive proposals need a regression target")


def label_proposals(episode: Episode, positive_iou: float = 0.5) -> list[LabeledProposal]:
    """Label every proposal against the episode's same-class ground truth."""
    if not 0.0 < positive_iou < 1.0:
        raise ValueError(f"positive_iou must lie in (0, 1), got {positive_iou}")
    labels: list[LabeledProposal] = []
    gt_by_class: dict[ClassId, list] = {}
    for cid, box in episode.ground_truth:
        gt_by_class.setdefault(cid, []).append(box)
    for cid, nodes in episode.proposals.items():
        gts = gt_by_class.get(cid, [])
        for i, node in enumerate(nodes):
            best, best_box = 0.0, None
            for g in gts:
                v = iou(node.box, g)
                if v > best:
                    best, best_box = v, g
            if best >= positive_iou and best_box is not None:
                labels.append(
                    LabeledProposal(cid, i, True, encode_delta(node.box, best_box))
                )
            else:
                labels.append(LabeledProposal(cid, i, False, None))
    return labels


def bce_loss(score: float, label: bool) -> float:
    """Binary cross-entropy -[y ln s + (1-y) ln(1-s)] for a score in (0, 1)."""
    s = float(score)
    if not 0.0 < s < 1.0:
        raise ValueError(f"score must lie strictly inside (0, 1), got {score}")
    return -math.log(s) if label else -math.log1p(-s)


def smooth_l1(pred: BoxDelta, target: BoxDelta) -> float:
    """Component-wise Huber loss (0.5 t^2 inside |t| < 1, |t| - 0.5 outside), summed."""
    total = 0.0
    for p, t in zip(pred.as_tuple(), target.as_tuple()):
        d = p - t
        total += 0.5 * d * d if abs(d) < 1.0 else abs(d) - 0.5
    return total


def _smooth_l1_vec(diff: np.ndarray) -> float:
    a = np.abs(diff)
    return float(np.where(a < 1.0, 0.5 * diff * diff, a - 0.5).sum())


def _smooth_l1_grad(diff: np.ndarray) -> np.ndarray:
    return np.where(np.abs(diff) < 1.0, diff, np.sign(diff))


def _softplus(z: float) -> float:
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def _sigmoid(z: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * z))


def _cosine_with_grads(x: np.ndarray, c: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    nx = float(np.linalg.norm(x))
    nc = float(np.linalg.norm(c))
    if nx == 0.0 or nc == 0.0:
        # similarity pinned to 0; subgradient choice is 0
        return 0.0, np.zeros_like(x), np.zeros_like(c)
    k = float(np.dot(x, c) / (nx * nc))
    dx = c / (nx * nc) - (k / (nx * nx)) * x
    dc = x / (nx * nc) - (k / (nc * nc)) * c
    return k, dx, dc


@dataclass
class LossParts:
    total: float
    bce: float
    smooth_l1: float


@dataclass
class Gradients:
    weight: np.ndarray
    scale: float
    bias: float
    regressor: np.ndarray


@dataclass
class _ClassSetup:
    """Parameter-independent per-class state, reusable across perturbations."""

    cid: ClassId
    x0: np.ndarray  # (N, D) raw proposal features
    start_c: np.ndarray  # (D,) class feature entering the intra stage
    trace_template: IntraTrace | None  # None in no-enhancement mode
    labeled: list[LabeledProposal]


class _EpisodeForward:
    """Caches graphs and groupings of one episode for repeated evaluation.

    Everything cached here is independent of (W, scale, bias, regressor):
    affinity weights come from original features and the class-graph pass has
    no learnable weight. Only the intra layers and the head are re-run per
    parameter setting.
    """

    def __init__(
        self,
        episode: Episode,
        labels: Sequence[LabeledProposal],
        toggles: EdgeToggles,
        theta: float = DEFAULT_IOU_THETA,
    ) -> None:
        self.toggles = toggles
        by_class: dict[ClassId, list[LabeledProposal]] = {}
        for lp in labels:
            if lp.class_id not in episode.proposals:
                raise ValueError(f"label references class {lp.class_id} with no proposals")
            if not 0 <= lp.proposal_index < len(episode.proposals[lp.class_id]):
                raise ValueError(
                    f"label index {lp.proposal_index} out of range for {lp.class_id}"
                )
            by_class.setdefault(lp.class_id, []).append(lp)

        novel = episode.novel_classes
        start_protos = {p.class_id: p for p in novel}
        if toggles.enhancement_enabled and not toggles.mlp_mode and toggles.class_class:
            table = _select_memory(episode, toggles) + list(novel)
            enhanced = inter_class_pass(build_inter_class_graph(table))
            for proto in enhanced:
                if proto.class_id.kind is ClassKind.NOVEL:
                    start_protos[proto.class_id] = proto

        self.classes: list[_ClassSetup] = []
        self.n_labeled = 0
        self.n_positive = 0
        for proto in novel:
            cid = proto.class_id
            nodes = episode.proposals.get(cid, ())
            labeled = by_class.get(cid, [])
            if not nodes or not labeled:
                continue
            x0 = np.stack([flatten(p.feature) for p in nodes])
            start = start_protos[cid]
            start_c = flatten(start.feature).copy()
            template: IntraTrace | None
            if not toggles.enhancement_enabled:
                template = None
            elif toggles.mlp_mode:
                template = _mlp_trace(x0, start_c)
            else:
                g = build_intra_class_graph(start, nodes, episode.global_feature, theta)
                n = g.num_proposals
                template = IntraTrace(
                    mlp_mode=False,
                    use_cp=toggles.uses_class_to_proposal,
                    use_pc=toggles.uses_proposal_to_class,
                    use_local=toggles.uses_local_context,
                    use_global=toggles.uses_global_context,
                    local_weights=g.pp_weights[:n, :n],
                    global_weights=g.pp_weights[:n, n],
                    cp_to_proposal=g.cp_to_proposal,
                    cp_to_class=g.cp_to_class,
                    global_feature=flatten(g.global_node),
                )
            self.classes.append(_ClassSetup(cid, x0, start_c, template, labeled))
            self.n_labeled += len(labeled)
            self.n_positive += sum(1 for lp in labeled if lp.positive)

    def _fresh_trace(self, setup: _ClassSetup) -> IntraTrace | None:
        t = setup.trace_template
        if t is None:
            return None
        return IntraTrace(
            mlp_mode=t.mlp_mode,
            use_cp=t.use_cp,
            use_pc=t.use_pc,
            use_local=t.use_local,
            use_global=t.use_global,
            local_weights=t.local_weights,
            global_weights=t.global_weights,
            cp_to_proposal=t.cp_to_proposal,
            cp_to_class=t.cp_to_class,
            global_feature=t.global_feature,
        )

    def loss(
        self,
        params: GcnParams,
        head: MatchHead,
        regression_weight: float = 1.0,
        collect: list[tuple[_ClassSetup, IntraTrace | None, np.ndarray, np.ndarray]] | None = None,
    ) -> LossParts:
        bce_sum = 0.0
        sl1_sum = 0.0
        for setup in self.classes:
            trace = self._fresh_trace(setup)
            if trace is None:
                x, c = setup.x0, setup.start_c
            else:
                x, c = run_intra_layers(setup.x0, setup.start_c, params, trace)
            if collect is not None:
                collect.append((setup, trace, x, c))
            for lp in setup.labeled:
                xi = x[lp.proposal_index]
                k, _, _ = _cosine_with_grads(xi, c)
                z = head.scale * k + head.bias
                bce_sum += _softplus(z) - (z if lp.positive else 0.0)
                if lp.positive:
                    pred = xi @ head.regressor
                    sl1_sum += _smooth_l1_vec(pred - np.asarray(lp.target.as_tuple()))
        bce = bce_sum / self.n_labeled if self.n_labeled else 0.0
        sl1 = sl1_sum / self.n_positive if self.n_positive else 0.0
        return LossParts(total=bce + regression_weight * sl1, bce=bce, smooth_l1=sl1)

    def loss_and_gradients(
        self,
        params: GcnParams,
        head: MatchHead,
        regression_weight: float = 1.0,
    ) -> tuple[LossParts, Gradients]:
        d = params.dim
        d_w = np.zeros((d, d))
        d_scale = 0.0
        d_bias = 0.0
        d_reg = np.zeros((d, 4))
        collected: list[tuple[_ClassSetup, IntraTrace | None, np.ndarray, np.ndarray]] = []
        parts = self.loss(params, head, regression_weight, collect=collected)
        inv_lab = 1.0 / self.n_labeled if self.n_labeled else 0.0
        inv_pos = regression_weight / self.n_positive if self.n_positive else 0.0

        for setup, trace, x, c in collected:
            d_x = np.zeros_like(x)
            d_c = np.zeros_like(c)
            for lp in setup.labeled:
                i = lp.proposal_index
                xi = x[i]
                k, dk_dx, dk_dc = _cosine_with_grads(xi, c)
                z = head.scale * k + head.bias
                gz = (_sigmoid(z) - (1.0 if lp.positive else 0.0)) * inv_lab
                d_scale += gz * k
                d_bias += gz
                coef = gz * head.scale
                d_x[i] += coef * dk_dx
                d_c += coef * dk_dc
                if lp.positive:
                    pred = xi @ head.regressor
                    gl = _smooth_l1_grad(pred - np.asarray(lp.target.as_tuple())) * inv_pos
                    d_reg += np.outer(xi, gl)
                    d_x[i] += head.regressor @ gl
            if trace is not None:
                d_w += _backward_intra(trace, d_x, d_c, params.weight)
        grads = Gradients(weight=d_w, scale=d_scale, bias=d_bias, regressor=d_reg)
        return parts, grads


def _backward_intra(trace: IntraTrace, d_x: np.ndarray, d_c: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Backpropagate output grads through the recorded layers; returns dL/dW."""
    d_w = np.zeros_like(weight)
    wt = weight.T
    for st in reversed(trace.layers):
        d_msg_p = d_x @ wt
        d_msg_c = d_c @ wt
        d_w += st.msg_p.T @ d_x
        d_w += np.outer(st.msg_c, d_c)
        d_x_in = d_x.copy()
        d_c_in = d_c.copy()
        if trace.mlp_mode:
            d_x_in += d_msg_p
            d_c_in += d_msg_c
        else:
            if trace.use_cp:
                d_c_in += trace.cp_to_proposal @ d_msg_p
            if trace.use_local:
                d_x_in += trace.local_weights.T @ d_msg_p
            # the global feature is a constant input: no gradient to route
            d_c_in += d_msg_c
            if trace.use_pc:
                d_x_in += np.outer(trace.cp_to_class, d_msg_c)
        d_x, d_c = d_x_in, d_c_in
    return d_w


def episode_loss(
    episode: Episode,
    labels: Sequence[LabeledProposal],
    params: GcnParams,
    head: MatchHead,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
    regression_weight: float = 1.0,
) -> LossParts:
    """Training loss of one episode under the configured toggles."""
    return _EpisodeForward(episode, labels, toggles, theta).loss(params, head, regression_weight)


def episode_gradients(
    episode: Episode,
    labels: Sequence[LabeledProposal],
    params: GcnParams,
    head: MatchHead,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
    regression_weight: float = 1.0,
) -> tuple[LossParts, Gradients]:
    """Analytic gradients of the episode loss for (W, scale, bias, regressor)."""
    fwd = _EpisodeForward(episode, labels, toggles, theta)
    return fwd.loss_and_gradients(params, head, regression_weight)


def finite_difference_gradients(
    episode: Episode,
    labels: Sequence[LabeledProposal],
    params: GcnParams,
    head: MatchHead,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
    regression_weight: float = 1.0,
    step: float = 1e-5,
) -> Gradients:
    """Central finite differences over every parameter entry.

    Slow by design; this is the oracle the analytic path is judged against.
    """
    fwd = _EpisodeForward(episode, labels, toggles, theta)

    def total(p: GcnParams, h: MatchHead) -> float:
        return fwd.loss(p, h, regression_weight).total

    d = params.dim
    d_w = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            wp = params.weight.copy()
            wm = params.weight.copy()
            wp[i, j] += step
            wm[i, j] -= step
            d_w[i, j] = (
                total(params.with_weight(wp), head) - total(params.with_weight(wm), head)
            ) / (2 * step)

    d_scale = (
        total(params, head.replace(scale=head.scale + step))
        - total(params, head.replace(scale=head.scale - step))
    ) / (2 * step)
    d_bias = (
        total(params, head.replace(bias=head.bias + step))
        - total(params, head.replace(bias=head.bias - step))
    ) / (2 * step)

    d_reg = np.zeros((d, 4))
    for i in range(d):
        for j in range(4):
            rp = head.regressor.copy()
            rm = head.regressor.copy()
            rp[i, j] += step
            rm[i, j] -= step
            d_reg[i, j] = (
                total(params, head.replace(regressor=rp))
                - total(params, head.replace(regressor=rm))
            ) / (2 * step)
    return Gradients(weight=d_w, scale=d_scale, bias=d_bias, regressor=d_reg)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    n = np.atleast_1d(np.asarray(n, dtype=np.float64))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float((np.abs(a - n) / denom).max())


@dataclass
class GradCheckReport:
    per_parameter: dict[str, float]
    max_rel_err: float
    tolerance: float
    passed: bool


def gradient_check(
    episode: Episode,
    labels: Sequence[LabeledProposal],
    params: GcnParams,
    head: MatchHead,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    inject_bug: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Relative error uses a 1e-6 floor in the denominator so genuinely tiny
    gradients are compared absolutely. ``inject_bug`` corrupts one analytic
    entry first; it exists so the failure path itself stays tested.
    """
    _, analytic = episode_gradients(episode, labels, params, head, toggles, theta)
    if inject_bug:
        w = analytic.weight.copy()
        w[0, 0] += 0.5 + abs(w[0, 0])
        analytic = Gradients(w, analytic.scale, analytic.bias, analytic.regressor)
    numeric = finite_difference_gradients(episode, labels, params, head, toggles, theta, step=step)
    per = {
        "weight": _rel_err(analytic.weight, numeric.weight),
        "scale": _rel_err(analytic.scale, numeric.scale),
        "bias": _rel_err(analytic.bias, numeric.bias),
        "regressor": _rel_err(analytic.regressor, numeric.regressor),
    }
    worst = max(per.values())
    return GradCheckReport(per, worst, tolerance, worst < tolerance)


_INIT_SALT = 0x5EED


def initialize_parameters(
    shape: tuple[int, int, int],
    seed: int,
    layers_inter: int = 1,
    layers_intra: int = 1,
) -> tuple[GcnParams, MatchHead]:
    """Seeded neutral start: W = I + N(0, 0.01^2), scale 1, bias 0, regressor 0."""
    h, w, c = shape
    d = h * w * c
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _INIT_SALT])))
    weight = np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
    params = GcnParams(weight, layers_inter=layers_inter, layers_intra=layers_intra)
    head = MatchHead(scale=1.0, bias=0.0, regressor=np.zeros((d, 4)))
    return params, head


@dataclass
class TraceRow:
    iteration: int
    total: float
    bce: float
    smooth_l1: float


@dataclass
class TrainResult:
    params: GcnParams
    head: MatchHead
    trace: list[TraceRow] = field(default_factory=list)


def train(
    episodes: Iterable[Episode],
    config: TrainConfig,
    toggles: EdgeToggles = EdgeToggles(),
    theta: float = DEFAULT_IOU_THETA,
    params: GcnParams | None = None,
    head: MatchHead | None = None,
    regression_weight: float = 1.0,
) -> TrainResult:
    """SGD with momentum and weight decay over an episode stream.

    ``episodes`` may be a finite sequence (cycled deterministically) or an
    iterator (consumed). Raises TrainingDiverged when the loss goes
    non-finite. With ``iterations`` 0 the initialization is returned as-is.
    """
    if isinstance(episodes, Sequence):
        stream: Iterator[Episode] = itertools.cycle(episodes) if episodes else iter(())
    else:
        stream = iter(episodes)

    if params is None or head is None:
        try:
            first = next(stream)
        except StopIteration:
            raise ValueError("episode stream is empty") from None
        stream = itertools.chain([first], stream)
        if params is None or head is None:
            p0, h0 = initialize_parameters(first.shape, config.seed)
            params = params if params is not None else p0
            head = head if head is not None else h0

    weight = params.weight.copy()
    scale, bias = head.scale, head.bias
    regressor = head.regressor.copy()
    v_w = np.zeros_like(weight)
    v_s = 0.0
    v_b = 0.0
    v_r = np.zeros_like(regressor)
    trace: list[TraceRow] = []
    d = params.dim

    for it in range(config.iterations):
        lr = config.learning_rate
        if config.lr_decay_at is not None and it >= config.lr_decay_at:
            lr *= 0.1
        g_w = np.zeros_like(weight)
        g_s = 0.0
        g_b = 0.0
        g_r = np.zeros_like(regressor)
        t_total = t_bce = t_sl1 = 0.0
        cur_params = GcnParams(weight, params.layers_inter, params.layers_intra)
        cur_head = MatchHead(scale, bias, regressor)
        for _ in range(config.batch_episodes):
            try:
                ep = next(stream)
            except StopIteration:
                raise ValueError("episode stream exhausted during training") from None
            if ep.feature_dim != d:
                raise ShapeError(
                    f"episode feature dim {ep.feature_dim} does not match parameters ({d})"
                )
            labels = label_proposals(ep, config.positive_iou)
            parts, grads = episode_gradients(
                ep, labels, cur_params, cur_head, toggles, theta, regression_weight
            )
            g_w += grads.weight
            g_s += grads.scale
            g_b += grads.bias
            g_r += grads.regressor
            t_total += parts.total
            t_bce += parts.bce
            t_sl1 += parts.smooth_l1
        nb = config.batch_episodes
        g_w /= nb
        g_s /= nb
        g_b /= nb
        g_r /= nb
        t_total /= nb
        t_bce /= nb
        t_sl1 /= nb
        if not math.isfinite(t_total):
            raise TrainingDiverged(f"non-finite loss {t_total} at iteration {it}")

        v_w = config.momentum * v_w + (g_w + config.weight_decay * weight)
        v_s = config.momentum * v_s + (g_s + config.weight_decay * scale)
        v_b = config.momentum * v_b + (g_b + config.weight_decay * bias)
        v_r = config.momentum * v_r + (g_r + config.weight_decay * regressor)
        weight = weight - lr * v_w
        scale = scale - lr * v_s
        bias = bias - lr * v_b
        regressor = regressor - lr * v_r
        trace.append(TraceRow(iteration=it, total=t_total, bce=t_bce, smooth_l1=t_sl1))

    return TrainResult(
        params=GcnParams(weight, params.layers_inter, params.layers_intra),
        head=MatchHead(scale, bias, regressor),
        trace=trace,
    )
