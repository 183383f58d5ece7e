"""JSON persistence: byte-stable round trips and the error taxonomy."""

import json

import numpy as np
import pytest

from graphdet.core import ClassKind
from graphdet.fileio import (
    MalformedDataError,
    ShapeInconsistencyError,
    VersionMismatchError,
    check_shape_compatible,
    read_checkpoint,
    read_episode,
    read_manifest,
    write_checkpoint,
    write_episode,
    write_manifest,
)
from graphdet.gcn import GcnParams
from graphdet.pipeline import MatchHead
from graphdet.synth import GenConfig, generate_episode


@pytest.fixture
def episode():
    cfg = GenConfig(num_base=3, num_novel=2, shots=2, proposals_per_class=5,
                    grid_height=1, grid_width=2, channels=3, seed=11)
    return generate_episode(cfg, 0, "eval")[0]


def test_episode_roundtrip_is_exact(episode, tmp_path):
    p1 = tmp_path / "ep.json"
    write_episode(episode, str(p1))
    back = read_episode(str(p1))
    assert back.shape == episode.shape
    assert back.image_width == episode.image_width
    assert np.array_equal(back.global_feature.data, episode.global_feature.data)
    assert back.ground_truth == episode.ground_truth
    for a, b in zip(episode.class_table, back.class_table):
        assert a.class_id == b.class_id and a.support_count == b.support_count
        assert np.array_equal(a.feature.data, b.feature.data)
    for cid in episode.proposals:
        for a, b in zip(episode.proposals[cid], back.proposals[cid]):
            assert a.box == b.box
            assert np.array_equal(a.feature.data, b.feature.data)
    # writing the read-back episode reproduces the file byte for byte
    p2 = tmp_path / "ep2.json"
    write_episode(back, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_roundtrip_is_exact(tmp_path, rng):
    params = GcnParams(np.eye(6) + rng.normal(size=(6, 6)) * 0.37, layers_inter=2, layers_intra=3)
    head = MatchHead(1.234567890123456, -0.9876, rng.normal(size=(6, 4)))
    path = tmp_path / "ck.json"
    write_checkpoint(str(path), params, head, (1, 2, 3), seed=9,
                     train_config={"learning_rate": 0.002, "iterations": 10})
    ck = read_checkpoint(str(path))
    assert np.array_equal(ck.params.weight, params.weight)
    assert ck.params.layers_inter == 2 and ck.params.layers_intra == 3
    assert ck.head.scale == head.scale and ck.head.bias == head.bias
    assert np.array_equal(ck.head.regressor, head.regressor)
    assert ck.shape == (1, 2, 3) and ck.seed == 9
    assert ck.train_config == {"learning_rate": 0.002, "iterations": 10}
    # optional fields may be absent
    bare = tmp_path / "bare.json"
    write_checkpoint(str(bare), params, head, (1, 2, 3))
    ck2 = read_checkpoint(str(bare))
    assert ck2.seed is None and ck2.train_config is None


def test_checkpoint_write_validates_shapes(tmp_path):
    params = GcnParams(np.eye(4))
    head = MatchHead(1.0, 0.0, np.zeros((4, 4)))
    with pytest.raises(ShapeInconsistencyError):
        write_checkpoint(str(tmp_path / "x.json"), params, head, (1, 1, 5))
    with pytest.raises(ShapeInconsistencyError):
        write_checkpoint(str(tmp_path / "x.json"), params,
                         MatchHead(1.0, 0.0, np.zeros((5, 4))), (1, 1, 4))


def test_missing_file_and_bad_json(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(MalformedDataError, match="cannot read"):
        read_episode(str(missing))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(MalformedDataError, match="invalid JSON"):
        read_episode(str(bad))
    arr = tmp_path / "arr.json"
    arr.write_text("[1,2,3]")
    with pytest.raises(MalformedDataError, match="JSON object"):
        read_episode(str(arr))


def test_kind_and_version_checks(episode, tmp_path):
    path = tmp_path / "ep.json"
    write_episode(episode, str(path))
    with pytest.raises(MalformedDataError, match="expected 'checkpoint'"):
        read_checkpoint(str(path))
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatchError):
        read_episode(str(path))


def test_non_finite_numbers_are_rejected(episode, tmp_path):
    path = tmp_path / "ep.json"
    write_episode(episode, str(path))
    text = path.read_text()
    k = text.index('"global_feature":[') + len('"global_feature":[')
    end = text.index(",", k)
    path.write_text(text[:k] + "NaN" + text[end:])
    with pytest.raises(MalformedDataError, match="non-finite"):
        read_episode(str(path))


def test_feature_length_mismatch_names_location(episode, tmp_path):
    path = tmp_path / "ep.json"
    write_episode(episode, str(path))
    doc = json.loads(path.read_text())
    doc["classes"][1]["feature"] = doc["classes"][1]["feature"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(ShapeInconsistencyError, match=r"classes\[1\]"):
        read_episode(str(path))


def test_malformed_entries(episode, tmp_path):
    path = tmp_path / "ep.json"

    def mutated(**changes):
        write_episode(episode, str(path))
        doc = json.loads(path.read_text())
        for dotted, value in changes.items():
            node = doc
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node[int(part)] if part.isdigit() else node[part]
            last = parts[-1]
            if value is ...:
                del node[last]
            else:
                node[int(last) if last.isdigit() else last] = value
        path.write_text(json.dumps(doc))
        return str(path)

    with pytest.raises(MalformedDataError, match="missing key"):
        read_episode(mutated(shape=...))
    with pytest.raises(MalformedDataError, match="integers"):
        read_episode(mutated(shape=[1, 2, "x"]))
    with pytest.raises(MalformedDataError, match="invalid kind"):
        read_episode(mutated(**{"classes.0.kind": "other"}))
    with pytest.raises(MalformedDataError, match="invalid class id"):
        read_episode(mutated(**{"classes.0.id": -2}))
    with pytest.raises(MalformedDataError, match="expected a number"):
        read_episode(mutated(**{"classes.0.feature.0": True}))
    with pytest.raises(MalformedDataError, match="4 numbers"):
        read_episode(mutated(**{"proposals.0.items.0.box": [1, 2, 3]}))
    with pytest.raises(MalformedDataError, match="positive extent"):
        read_episode(mutated(**{"proposals.0.items.0.box": [1, 2, 0, 5]}))
    # duplicate proposal group for one class
    write_episode(episode, str(path))
    doc = json.loads(path.read_text())
    doc["proposals"].append(doc["proposals"][0])
    path.write_text(json.dumps(doc))
    with pytest.raises(MalformedDataError, match="duplicate proposal group"):
        read_episode(str(path))
    # cross-reference failures surface as malformed data, naming the episode
    with pytest.raises(MalformedDataError, match="unknown class"):
        read_episode(mutated(**{"ground_truth.0.class.id": 77}))


def test_episode_accepts_integer_numbers(episode, tmp_path):
    path = tmp_path / "ep.json"
    write_episode(episode, str(path))
    doc = json.loads(path.read_text())
    doc["classes"][0]["feature"][0] = 1  # plain int where a float is expected
    path.write_text(json.dumps(doc))
    back = read_episode(str(path))
    assert back.class_table[0].feature.data.reshape(-1)[0] == 1.0


def test_checkpoint_error_paths(tmp_path):
    params = GcnParams(np.eye(2), layers_intra=2)
    head = MatchHead(2.0, 0.0, np.zeros((2, 4)))
    path = tmp_path / "ck.json"

    def mutated(fn):
        write_checkpoint(str(path), params, head, (1, 1, 2), seed=1)
        doc = json.loads(path.read_text())
        fn(doc)
        path.write_text(json.dumps(doc))
        return str(path)

    with pytest.raises(ShapeInconsistencyError, match="rows"):
        read_checkpoint(mutated(lambda d: d["gcn"]["weight"].pop()))
    with pytest.raises(ShapeInconsistencyError, match="columns"):
        read_checkpoint(mutated(lambda d: d["gcn"]["weight"][0].pop()))
    with pytest.raises(ShapeInconsistencyError, match="regressor"):
        read_checkpoint(mutated(lambda d: d["head"]["regressor"][1].pop()))
    with pytest.raises(MalformedDataError, match="layers_inter"):
        read_checkpoint(mutated(lambda d: d["gcn"].pop("layers_inter")))
    with pytest.raises(MalformedDataError, match="must be numbers"):
        read_checkpoint(mutated(lambda d: d["head"].update(scale="big")))
    with pytest.raises(MalformedDataError, match="seed"):
        read_checkpoint(mutated(lambda d: d.update(seed="zero")))
    with pytest.raises(MalformedDataError):
        read_checkpoint(mutated(lambda d: d["gcn"].update(layers_intra=0)))


def test_shape_compatibility_guard(episode, tmp_path):
    params = GcnParams(np.eye(4))
    head = MatchHead(1.0, 0.0, np.zeros((4, 4)))
    path = tmp_path / "ck.json"
    write_checkpoint(str(path), params, head, (1, 1, 4))
    ck = read_checkpoint(str(path))
    with pytest.raises(ShapeInconsistencyError, match="does not match checkpoint"):
        check_shape_compatible(ck, episode, "ep.json")


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "manifest.json"
    write_manifest(str(path), {"seed": 4, "shots": 2}, ["ep_000.json", "ep_001.json"], "eval")
    m = read_manifest(str(path))
    assert m.split == "eval"
    assert m.config == {"seed": 4, "shots": 2}
    assert m.episodes == ["ep_000.json", "ep_001.json"]
    assert m.episode_paths() == [str(tmp_path / "ep_000.json"), str(tmp_path / "ep_001.json")]

    doc = json.loads(path.read_text())
    doc["split"] = "dev"
    path.write_text(json.dumps(doc))
    with pytest.raises(MalformedDataError, match="split"):
        read_manifest(str(path))
    doc["split"] = "train"
    doc["episodes"] = ["a.json", 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(MalformedDataError, match="file names"):
        read_manifest(str(path))
