"""Synthetic episodic scenes with controllable difficulty.

World geometry is derived once from the config seed: unit-norm class centers
on the feature sphere (consecutive base classes form high-cosine sibling
pairs, and each novel class is a sibling of the base class with the same
index), one fixed drift direction per class, one drift direction shared by
the whole world, and one fixed projection used for positional encoding.
Per-episode randomness comes from a counter style generator (numpy Philox)
keyed by (seed, role, episode index), so any episode can be generated
independently and concurrently.

Feature recipe, all magnitudes relative to the unit-norm centers. "Noise"
below always means a random mixture of the base-class center directions
(scaled to the configured spread): clutter lives in the span of abundant
class content, so no fixed linear map can strip it without also destroying
class evidence, while averaging over supports, cluster peers, or proposals
still cancels it. Novel-class directions never appear as clutter or as
confusers; novel content is rare by definition, so base-episode training
cannot profit from suppressing it.

* support of class c: center_c + drift + noise, where drift realizes the
  support/query distribution gap for this class in this episode:
  support_shift * (1.0 * g1 * shift_dir_c + 0.5 * g2 * shared_drift_dir)
  with g1, g2 standard normal draws. The shared component is the same
  direction in every episode, so a learned linear map can suppress it; the
  per-class component can only be countered through the graph (related
  prototypes, proposal evidence). Both inflate the prototype norm, which
  deflates every cosine of the class and pushes scores toward the detection
  threshold.
* positive proposal: center_c + posenc(delta to its source box) + noise,
  where delta is exactly the regression target; posenc(0) = 0, so with zero
  jitter the feature equals the class center under zero noise
* background proposal: a confusable base class's center (half the time) or
  a random unit vector, plus noise; no positional term. Confuser centers are
  drawn only from classes outside the target's sibling cluster, so pulling a
  prototype toward its siblings never pulls it toward its own negatives, and
  each confusable class appears at most once per episode and class.
  Background boxes arrive in overlapping groups of four that share one
  content direction, so every negative has proposal-graph peers rather than
  leaning on the global node alone.
* global scene node: mean of every proposal feature in the scene + noise

Training episodes draw their target classes from the base pool (they act as
few-shot classes and are excluded from the episode's memory); eval episodes
target the held-out novel classes. Novel centers therefore never appear in
training data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import BBox, ClassId, ClassKind, ClassPrototype, Episode, FeatureGrid, ProposalNode, unflatten
from .geometry import encode_delta, iou
from .prototype import average_supports
from .training import LabeledProposal, label_proposals

_SALT_WORLD = 101
_SALT_EPISODE = 202
_ROLE_CODES = {"train": 0, "eval": 1}

_SIBLING_EPS = 0.25  # cosine(center, sibling) = 1/sqrt(1 + eps^2) ~ 0.970
_CONFUSER_MAX_COS = 0.8  # confuser pool = classes below this similarity
_BASE_SUPPORT_COUNT = 30
_CONFUSER_PROB = 0.5
_DRIFT_CLASS_MIX = 1.0  # per-class drift component (never seen at eval time)
_DRIFT_SHARED_MIX = 0.5  # shared drift component (same direction every episode)
_NEG_CLUSTER = 4  # background boxes arrive in overlapping groups of this size
_GT_MIN_FRAC, _GT_MAX_FRAC = 0.15, 0.35
_BG_MIN_FRAC, _BG_MAX_FRAC = 0.08, 0.30
_GT_OVERLAP_LIMIT = 0.5
_PLACEMENT_TRIES = 50
_BACKGROUND_TRIES = 20
_POSENC_FREQ = 3.0
_MIN_EXTENT = 1e-6


class GenerationError(RuntimeError):
    """The generator could not satisfy its own placement constraints."""


@dataclass(frozen=True)
class GenConfig:
    num_base: int = 10
    num_novel: int = 5
    shots: int = 2
    proposals_per_class: int = 16
    grid_height: int = 2
    grid_width: int = 2
    channels: int = 32
    cluster_spread: float = 0.2
    support_shift: float = 0.6
    jitter: float = 0.1
    min_objects: int | None = None
    max_objects: int | None = None
    image_width: float = 128.0
    image_height: float = 128.0
    posenc_scale: float = 0.3
    label_iou: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_base < 0 or self.num_novel < 1:
            raise ValueError("need num_base >= 0 and num_novel >= 1")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.proposals_per_class < 1:
            raise ValueError("proposals_per_class must be >= 1")
        if min(self.grid_height, self.grid_width, self.channels) < 1:
            raise ValueError("feature grid dimensions must be >= 1")
        if self.cluster_spread < 0 or self.support_shift < 0 or self.posenc_scale < 0:
            raise ValueError("spread, shift and posenc_scale must be >= 0")
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError(f"jitter must lie in [0, 0.5), got {self.jitter}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0.0 < self.label_iou < 1.0:
            raise ValueError("label_iou must lie in (0, 1)")
        lo, hi = self.objects_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid objects range ({lo}, {hi})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.grid_height, self.grid_width, self.channels)

    @property
    def feature_dim(self) -> int:
        return self.grid_height * self.grid_width * self.channels

    @property
    def objects_range(self) -> tuple[int, int]:
        lo = self.min_objects if self.min_objects is not None else self.num_novel
        hi = self.max_objects if self.max_objects is not None else lo + 3
        return lo, hi


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_unit(rng: np.random.Generator, d: int) -> np.ndarray:
    return _unit(rng.normal(size=d))


def _orthogonal_unit(rng: np.random.Generator, anchor: np.ndarray) -> np.ndarray:
    v = rng.normal(size=anchor.size)
    v -= (v @ anchor) * anchor
    return _unit(v)


def _sibling(anchor: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return _unit(anchor + _SIBLING_EPS * _orthogonal_unit(rng, anchor))


class _World:
    """Dataset-level geometry shared by every episode of one config."""

    def __init__(self, cfg: GenConfig) -> None:
        d = cfg.feature_dim
        rng = _rng(cfg.seed, _SALT_WORLD)
        centers = np.zeros((cfg.num_base + cfg.num_novel, d))
        for k in range(cfg.num_base):
            if k % 2 == 1:
                centers[k] = _sibling(centers[k - 1], rng)
            else:
                centers[k] = _random_unit(rng, d)
        for j in range(cfg.num_novel):
            idx = cfg.num_base + j
            if cfg.num_base > 0:
                centers[idx] = _sibling(centers[j % cfg.num_base], rng)
            else:
                centers[idx] = _random_unit(rng, d)
        self.centers = centers
        self.shift_dirs = np.stack(
            [_orthogonal_unit(rng, centers[i]) for i in range(centers.shape[0])]
        )
        self.shared_drift_dir = _random_unit(rng, d)
        self.posenc_proj = rng.normal(0.0, _POSENC_FREQ, size=(d, 4))
        # Scene clutter and confusers reuse only base-class content: novel
        # classes are rare by definition, so their directions never appear as
        # background. Training on base episodes therefore gains nothing from
        # suppressing novel directions, which keeps base-trained weights
        # neutral on held-out classes instead of poisoned against them.
        self.clutter_basis = centers[: cfg.num_base]
        # Per-class confuser pools: base classes outside the sibling cluster.
        sims = centers @ centers.T
        n = centers.shape[0]
        self.confuser_pool = [
            [o for o in range(cfg.num_base) if o != i and abs(sims[i, o]) < _CONFUSER_MAX_COS]
            for i in range(n)
        ]


_WORLD_CACHE: dict[tuple, _World] = {}


def _world_for(cfg: GenConfig) -> _World:
    key = (
        cfg.seed, cfg.num_base, cfg.num_novel, cfg.feature_dim,
    )
    world = _WORLD_CACHE.get(key)
    if world is None:
        world = _World(cfg)
        if len(_WORLD_CACHE) > 64:
            _WORLD_CACHE.clear()
        _WORLD_CACHE[key] = world
    return world


def class_centers(cfg: GenConfig) -> np.ndarray:
    """All class centers, base rows first; read-only copy."""
    out = _world_for(cfg).centers.copy()
    out.flags.writeable = False
    return out


def sibling_pairs(cfg: GenConfig) -> list[tuple[int, int]]:
    """(novel center index, base center index) pairs at high cosine."""
    if cfg.num_base == 0:
        return []
    return [(cfg.num_base + j, j % cfg.num_base) for j in range(cfg.num_novel)]


def _noise(
    rng: np.random.Generator,
    d: int,
    scale: float,
    basis: np.ndarray | None = None,
) -> np.ndarray:
    # With a basis, clutter is a random mixture of the world's class
    # directions: it lives in the same span as the signal, so no fixed linear
    # map can strip it while preserving class evidence.
    if scale == 0.0:
        return np.zeros(d)
    if basis is None or basis.shape[0] == 0:
        return rng.normal(size=d) * (scale / math.sqrt(d))
    k = basis.shape[0]
    return (rng.normal(size=k) * (scale / math.sqrt(k))) @ basis


def _clip_box(x1: float, y1: float, x2: float, y2: float, iw: float, ih: float) -> BBox:
    x1, x2 = min(max(x1, 0.0), iw), min(max(x2, 0.0), iw)
    y1, y2 = min(max(y1, 0.0), ih), min(max(y2, 0.0), ih)
    if x2 - x1 < _MIN_EXTENT:
        x1 = min(max(x1, 0.0), iw - _MIN_EXTENT)
        x2 = x1 + _MIN_EXTENT
    if y2 - y1 < _MIN_EXTENT:
        y1 = min(max(y1, 0.0), ih - _MIN_EXTENT)
        y2 = y1 + _MIN_EXTENT
    return BBox(x=x1, y=y1, w=x2 - x1, h=y2 - y1)


def _place_objects(rng: np.random.Generator, count: int, iw: float, ih: float) -> list[BBox]:
    boxes: list[BBox] = []
    for n in range(count):
        placed = False
        for _ in range(_PLACEMENT_TRIES):
            w = rng.uniform(_GT_MIN_FRAC, _GT_MAX_FRAC) * iw
            h = rng.uniform(_GT_MIN_FRAC, _GT_MAX_FRAC) * ih
            x = rng.uniform(0.0, iw - w)
            y = rng.uniform(0.0, ih - h)
            box = BBox(x=x, y=y, w=w, h=h)
            if all(iou(box, other) < _GT_OVERLAP_LIMIT for other in boxes):
                boxes.append(box)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place object {n} of {count} after {_PLACEMENT_TRIES} tries"
            )
    return boxes


def _jitter_box(box: BBox, rng: np.random.Generator, jitter: float, iw: float, ih: float) -> BBox:
    if jitter == 0.0:
        return box
    cx = box.cx + rng.uniform(-jitter, jitter) * box.w
    cy = box.cy + rng.uniform(-jitter, jitter) * box.h
    w = box.w * math.exp(rng.uniform(-jitter, jitter))
    h = box.h * math.exp(rng.uniform(-jitter, jitter))
    return _clip_box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, iw, ih)


def _background_box(
    rng: np.random.Generator, gts: list[BBox], label_iou: float, iw: float, ih: float
) -> BBox:
    box = None
    for _ in range(_BACKGROUND_TRIES):
        w = rng.uniform(_BG_MIN_FRAC, _BG_MAX_FRAC) * iw
        h = rng.uniform(_BG_MIN_FRAC, _BG_MAX_FRAC) * ih
        x = rng.uniform(0.0, iw - w)
        y = rng.uniform(0.0, ih - h)
        box = BBox(x=x, y=y, w=w, h=h)
        if all(iou(box, g) < label_iou for g in gts):
            return box
    return box  # rare: accept the overlap, labels are recomputed from IoU anyway


def generate_episode(
    cfg: GenConfig, episode_index: int, role: str = "eval"
) -> tuple[Episode, list[LabeledProposal]]:
    """Generate one episode plus its proposal labels.

    ``role`` picks where target classes come from: "eval" uses the held-out
    novel pool with all base classes as memory; "train" samples target
    classes from the base pool and keeps the remaining base classes as
    memory. Identical (cfg, index, role) triples give identical episodes.
    """
    if role not in _ROLE_CODES:
        raise ValueError(f"role must be 'train' or 'eval', got {role!r}")
    if episode_index < 0:
        raise ValueError("episode_index must be >= 0")
    world = _world_for(cfg)
    d = cfg.feature_dim
    iw, ih = cfg.image_width, cfg.image_height
    rng = _rng(cfg.seed, _SALT_EPISODE, _ROLE_CODES[role], episode_index)

    if role == "eval":
        target_ids = list(range(cfg.num_base, cfg.num_base + cfg.num_novel))
        memory_ids = list(range(cfg.num_base))
    else:
        if cfg.num_base < cfg.num_novel:
            raise GenerationError(
                f"training episodes need num_base >= num_novel ({cfg.num_base} < {cfg.num_novel})"
            )
        target_ids = sorted(rng.choice(cfg.num_base, size=cfg.num_novel, replace=False).tolist())
        memory_ids = [b for b in range(cfg.num_base) if b not in set(target_ids)]

    table: list[ClassPrototype] = []
    for b in memory_ids:
        table.append(
            ClassPrototype(
                ClassId(b, ClassKind.BASE),
                unflatten(world.centers[b], cfg.shape),
                _BASE_SUPPORT_COUNT,
            )
        )
    target_cids: list[ClassId] = []
    for t in target_ids:
        cid = ClassId(t, ClassKind.NOVEL)
        target_cids.append(cid)
        g1, g2 = rng.normal(size=2)
        drift = cfg.support_shift * (
            _DRIFT_CLASS_MIX * g1 * world.shift_dirs[t]
            + _DRIFT_SHARED_MIX * g2 * world.shared_drift_dir
        )
        supports = [
            unflatten(
                world.centers[t] + drift + _noise(rng, d, cfg.cluster_spread, world.clutter_basis),
                cfg.shape,
            )
            for _ in range(cfg.shots)
        ]
        table.append(ClassPrototype(cid, average_supports(supports), cfg.shots))

    lo, hi = cfg.objects_range
    n_obj = int(rng.integers(lo, hi + 1))
    gt_boxes = _place_objects(rng, n_obj, iw, ih)
    gt_classes: list[ClassId] = []
    for i in range(n_obj):
        if i < len(target_cids):
            gt_classes.append(target_cids[i])
        else:
            gt_classes.append(target_cids[int(rng.integers(0, len(target_cids)))])
    ground_truth = list(zip(gt_classes, gt_boxes))

    proposals: dict[ClassId, list[ProposalNode]] = {}
    all_feats: list[np.ndarray] = []
    for cid in target_cids:
        center = world.centers[cid.id]
        class_gts = [box for c, box in ground_truth if c == cid]
        n = cfg.proposals_per_class
        n_pos = n // 2 if class_gts else 0
        nodes: list[ProposalNode] = []
        for i in range(n_pos):
            src = class_gts[i % len(class_gts)]
            box = _jitter_box(src, rng, cfg.jitter, iw, ih)
            delta = np.asarray(encode_delta(box, src).as_tuple())
            posenc = cfg.posenc_scale * np.sin(world.posenc_proj @ delta) / math.sqrt(d)
            feat = center + posenc + _noise(rng, d, cfg.cluster_spread, world.clutter_basis)
            all_feats.append(feat)
            nodes.append(ProposalNode(box, unflatten(feat, cfg.shape), cid))
        pool = world.confuser_pool[cid.id]
        n_neg = n - n_pos
        n_clusters = -(-n_neg // _NEG_CLUSTER)
        # Confuser classes are distinct within an episode: a repeated center
        # would give the prototype's proposal-mean pull a second mode.
        flags = rng.uniform(size=n_clusters) < _CONFUSER_PROB if pool else np.zeros(n_clusters, bool)
        k_conf = min(int(flags.sum()), len(pool))
        picks = rng.choice(len(pool), size=k_conf, replace=False).tolist() if k_conf else []
        anchor: BBox | None = None
        cluster_dir = np.zeros(d)
        for k in range(n_neg):
            # Background boxes come in overlapping clusters: an isolated
            # negative would lean on the global node alone in the proposal
            # graph, so give every negative local peers as real scenes do.
            # Boxes in one cluster cover the same region, so they share one
            # content direction; only the additive noise differs per box.
            if anchor is None or k % _NEG_CLUSTER == 0:
                anchor = _background_box(rng, class_gts, cfg.label_iou, iw, ih)
                box = anchor
                if flags[k // _NEG_CLUSTER] and picks:
                    cluster_dir = world.centers[pool[picks.pop()]]
                else:
                    cluster_dir = _random_unit(rng, d)
            else:
                box = _jitter_box(anchor, rng, 0.5 * cfg.jitter, iw, ih)
                if any(iou(box, g) >= cfg.label_iou for g in class_gts):
                    box = anchor
            feat = cluster_dir + _noise(rng, d, cfg.cluster_spread, world.clutter_basis)
            all_feats.append(feat)
            nodes.append(ProposalNode(box, unflatten(feat, cfg.shape), cid))
        order = rng.permutation(len(nodes))
        proposals[cid] = [nodes[int(i)] for i in order]

    # Image context is the pooled scene content, so the global node averages
    # every proposal feature rather than privileging annotated objects.
    if all_feats:
        scene_mean = np.mean(all_feats, axis=0)
    else:
        scene_mean = np.zeros(d)
    global_feature = unflatten(scene_mean + _noise(rng, d, cfg.cluster_spread, world.clutter_basis), cfg.shape)

    episode = Episode(
        image_width=iw,
        image_height=ih,
        class_table=table,
        proposals=proposals,
        global_feature=global_feature,
        ground_truth=ground_truth,
    )
    return episode, label_proposals(episode, cfg.label_iou)


def episode_stream(cfg: GenConfig, role: str = "train", start_index: int = 0) -> Iterator[Episode]:
    """Endless deterministic stream of episodes for the trainer."""
    index = start_index
    while True:
        yield generate_episode(cfg, index, role)[0]
        index += 1


def eval_episodes(cfg: GenConfig, count: int, start_index: int = 0) -> list[tuple[Episode, list[LabeledProposal]]]:
    """A fixed evaluation set of ``count`` episodes."""
    return [generate_episode(cfg, start_index + i, "eval") for i in range(count)]
