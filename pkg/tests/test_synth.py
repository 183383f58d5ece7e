"""Synthetic scene generator: determinism, geometry, difficulty knobs."""

import math

import numpy as np
import pytest

from graphdet.core import ClassKind, flatten
from graphdet.geometry import iou
from graphdet.graph import cosine
from graphdet.synth import (
    GenConfig,
    GenerationError,
    class_centers,
    eval_episodes,
    episode_stream,
    generate_episode,
    sibling_pairs,
)
from graphdet import synth


def small_cfg(**kw):
    defaults = dict(num_base=4, num_novel=2, shots=2, proposals_per_class=6,
                    grid_height=1, grid_width=1, channels=8, seed=3)
    defaults.update(kw)
    return GenConfig(**defaults)


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(num_novel=0)
    with pytest.raises(ValueError):
        GenConfig(shots=0)
    with pytest.raises(ValueError):
        GenConfig(proposals_per_class=0)
    with pytest.raises(ValueError):
        GenConfig(channels=0)
    with pytest.raises(ValueError):
        GenConfig(cluster_spread=-0.1)
    with pytest.raises(ValueError):
        GenConfig(jitter=0.5)
    with pytest.raises(ValueError):
        GenConfig(label_iou=1.0)
    with pytest.raises(ValueError):
        GenConfig(min_objects=5, max_objects=2)
    assert GenConfig().shape == (2, 2, 32)
    assert GenConfig().feature_dim == 128


def test_generation_is_deterministic():
    cfg = small_cfg()
    a, la = generate_episode(cfg, 7, "eval")
    b, lb = generate_episode(cfg, 7, "eval")
    assert np.array_equal(a.global_feature.data, b.global_feature.data)
    for pa, pb in zip(a.class_table, b.class_table):
        assert pa.class_id == pb.class_id
        assert np.array_equal(pa.feature.data, pb.feature.data)
    for cid in a.proposals:
        for na, nb in zip(a.proposals[cid], b.proposals[cid]):
            assert na.box == nb.box
            assert np.array_equal(na.feature.data, nb.feature.data)
    assert la == lb
    c, _ = generate_episode(cfg, 8, "eval")
    assert not np.array_equal(a.global_feature.data, c.global_feature.data)


def test_role_and_index_validation():
    cfg = small_cfg()
    with pytest.raises(ValueError):
        generate_episode(cfg, 0, "test")
    with pytest.raises(ValueError):
        generate_episode(cfg, -1, "eval")
    with pytest.raises(GenerationError):
        generate_episode(small_cfg(num_base=1, num_novel=2), 0, "train")


def test_eval_episode_class_table():
    cfg = small_cfg()
    ep, _ = generate_episode(cfg, 0, "eval")
    base = [p for p in ep.class_table if p.class_id.kind is ClassKind.BASE]
    novel = [p for p in ep.class_table if p.class_id.kind is ClassKind.NOVEL]
    assert [p.class_id.id for p in base] == list(range(cfg.num_base))
    assert [p.class_id.id for p in novel] == [cfg.num_base + j for j in range(cfg.num_novel)]
    centers = class_centers(cfg)
    for p in base:
        # memory prototypes are the exact class centers with a large support count
        assert np.allclose(flatten(p.feature), centers[p.class_id.id], atol=0)
        assert p.support_count == synth._BASE_SUPPORT_COUNT
    for p in novel:
        assert p.support_count == cfg.shots
        assert len(ep.proposals[p.class_id]) == cfg.proposals_per_class


def test_train_episodes_target_base_classes():
    cfg = small_cfg()
    ep, _ = generate_episode(cfg, 0, "train")
    target_ids = {p.class_id.id for p in ep.class_table if p.class_id.kind is ClassKind.NOVEL}
    memory_ids = {p.class_id.id for p in ep.class_table if p.class_id.kind is ClassKind.BASE}
    assert len(target_ids) == cfg.num_novel
    assert target_ids <= set(range(cfg.num_base))
    assert memory_ids == set(range(cfg.num_base)) - target_ids
    # novel centers never leak into training scenes
    centers = class_centers(cfg)
    novel_rows = centers[cfg.num_base:]
    for cid, nodes in ep.proposals.items():
        for node in nodes:
            f = flatten(node.feature)
            for row in novel_rows:
                assert abs(float(f @ row) / (np.linalg.norm(f) * 1.0)) < 0.999


def test_world_geometry():
    cfg = small_cfg(channels=16)
    centers = class_centers(cfg)
    assert centers.shape == (cfg.num_base + cfg.num_novel, 16)
    norms = np.linalg.norm(centers, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)
    want = 1.0 / math.sqrt(1.0 + synth._SIBLING_EPS ** 2)
    for novel_idx, base_idx in sibling_pairs(cfg):
        got = float(centers[novel_idx] @ centers[base_idx])
        assert got == pytest.approx(want, abs=1e-9)
    with pytest.raises(ValueError):
        centers[0, 0] = 2.0


def test_confuser_pools_exclude_sibling_cluster():
    cfg = small_cfg(channels=16)
    centers = class_centers(cfg)
    world = synth._world_for(cfg)
    for i, pool in enumerate(world.confuser_pool):
        assert i not in pool
        for o in pool:
            assert abs(float(centers[i] @ centers[o])) < synth._CONFUSER_MAX_COS


def test_noiseless_episode_degenerates_to_centers():
    cfg = small_cfg(cluster_spread=0.0, support_shift=0.0, jitter=0.0)
    ep, labels = generate_episode(cfg, 2, "eval")
    centers = class_centers(cfg)
    by_idx = {(lp.class_id, lp.proposal_index): lp.positive for lp in labels}
    for p in ep.class_table:
        if p.class_id.kind is ClassKind.NOVEL:
            assert np.allclose(flatten(p.feature), centers[p.class_id.id], atol=1e-12)
            for i, node in enumerate(ep.proposals[p.class_id]):
                if by_idx[(p.class_id, i)]:
                    # zero jitter: the box is its own source, posenc(0) = 0
                    assert cosine(node.feature, p.feature) == pytest.approx(1.0, abs=1e-12)
    all_feats = [flatten(n.feature) for nodes in ep.proposals.values() for n in nodes]
    assert np.allclose(flatten(ep.global_feature), np.mean(all_feats, axis=0), atol=1e-12)


def test_scene_layout_contracts():
    cfg = small_cfg()
    for idx in range(5):
        ep, labels = generate_episode(cfg, idx, "eval")
        gts = [b for _, b in ep.ground_truth]
        lo, hi = cfg.objects_range
        assert lo <= len(gts) <= hi
        for i, a in enumerate(gts):
            for b in gts[i + 1:]:
                assert iou(a, b) < synth._GT_OVERLAP_LIMIT
        by_class = {}
        for c, b in ep.ground_truth:
            by_class.setdefault(c, []).append(b)
        for lp in labels:
            box = ep.proposals[lp.class_id][lp.proposal_index].box
            best = max((iou(box, g) for g in by_class.get(lp.class_id, [])), default=0.0)
            assert lp.positive == (best >= cfg.label_iou)


def test_positive_fraction_is_learnable():
    cfg = small_cfg()
    frac = []
    for idx in range(60):
        _, labels = generate_episode(cfg, idx, "train")
        frac.append(np.mean([lp.positive for lp in labels]))
    assert 0.2 <= float(np.mean(frac)) <= 0.8


def test_support_shift_degrades_prototype_alignment():
    means = []
    for shift in (0.0, 2.0, 4.0):
        cfg = small_cfg(support_shift=shift, channels=16)
        vals = []
        for idx in range(30):
            ep, labels = generate_episode(cfg, idx, "eval")
            pos = {(lp.class_id, lp.proposal_index) for lp in labels if lp.positive}
            for p in ep.class_table:
                if p.class_id.kind is ClassKind.NOVEL:
                    for i, node in enumerate(ep.proposals[p.class_id]):
                        if (p.class_id, i) in pos:
                            vals.append(cosine(node.feature, p.feature))
        means.append(float(np.mean(vals)))
    assert means[0] > means[1] > means[2]


def test_stream_and_eval_set_indexing():
    cfg = small_cfg()
    stream = episode_stream(cfg, "train", start_index=2)
    for i in range(2, 5):
        got = next(stream)
        want, _ = generate_episode(cfg, i, "train")
        assert np.array_equal(got.global_feature.data, want.global_feature.data)
    pairs = eval_episodes(cfg, 3, start_index=4)
    assert len(pairs) == 3
    for offset, (ep, labels) in enumerate(pairs):
        want, want_labels = generate_episode(cfg, 4 + offset, "eval")
        assert np.array_equal(ep.global_feature.data, want.global_feature.data)
        assert labels == want_labels


def test_background_boxes_form_overlapping_groups():
    cfg = small_cfg(proposals_per_class=12)
    linked = 0
    total = 0
    for idx in range(10):
        ep, labels = generate_episode(cfg, idx, "eval")
        neg = {}
        for lp in labels:
            if not lp.positive:
                neg.setdefault(lp.class_id, []).append(lp.proposal_index)
        for cid, idxs in neg.items():
            nodes = ep.proposals[cid]
            for i in idxs:
                total += 1
                if any(iou(nodes[i].box, nodes[j].box) > 0.7 for j in idxs if j != i):
                    linked += 1
    assert total > 0
    assert linked / total > 0.6
