import json

import numpy as np
import pytest

from tablebot.blockworld import (
    TaskKind,
    TaskSpec,
    VariationSpec,
    build_variations,
    dump_episode_ppms,
    generate_dataset,
    generate_pretrain_corpus,
    load_dataset,
    load_pretrain_corpus,
    read_episode,
    rollout_expert,
    write_episode,
)

REACH = TaskSpec.of(TaskKind.REACH_TARGET)
PUSH = TaskSpec.of(TaskKind.PUSH_BUTTONS)


def test_episode_roundtrip_bitwise(tmp_path):
    rec, ok = rollout_expert(PUSH, VariationSpec(colors=(0, 1, 2), order=(2, 1, 0)), 12)
    assert ok
    rec.variation_id = 5
    p = tmp_path / "ep.bwep"
    write_episode(p, rec)
    blob1 = p.read_bytes()
    assert blob1[:4] == b"BWEP"
    back = read_episode(p)
    assert back.task == rec.task
    assert back.variation_id == 5
    assert back.instruction == rec.instruction
    assert len(back.steps) == len(rec.steps)
    write_episode(tmp_path / "ep2.bwep", back)
    assert (tmp_path / "ep2.bwep").read_bytes() == blob1
    for (o1, a1), (o2, a2) in zip(rec.steps, back.steps):
        assert np.array_equal(o1.images, o2.images)
        assert np.array_equal(o1.proprio, o2.proprio)
        assert np.array_equal(a1.as_array(), a2.as_array())


def test_generate_dataset_manifest(tmp_path):
    variations, splits = build_variations(REACH, 2, seed=1)
    manifest = generate_dataset(REACH, variations, 10, 7, tmp_path / "d", splits=splits)
    assert len(manifest["episodes"]) == 20
    assert manifest["failures"] == 0
    assert manifest["counts"] == {"0": 10, "1": 10}
    on_disk = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert on_disk["task"] == "reach_target"
    assert len(on_disk["variations"]) == 2


def test_dataset_bitwise_determinism(tmp_path):
    variations, splits = build_variations(PUSH, 2, seed=2)
    generate_dataset(PUSH, variations, 3, 11, tmp_path / "a", splits=splits)
    generate_dataset(PUSH, variations, 3, 11, tmp_path / "b", splits=splits)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_unseen_variations_listed_not_demonstrated(tmp_path):
    variations, splits = build_variations(PUSH, 4, seed=3, holdout_orderings=2)
    manifest = generate_dataset(PUSH, variations, 2, 5, tmp_path / "d", splits=splits)
    assert len(manifest["episodes"]) == 8  # only the 4 train variations
    labels = [v["split"] for v in manifest["variations"]]
    assert labels.count("unseen_ordering") == 2
    ds = load_dataset(tmp_path / "d")
    assert len(ds.variations("unseen_ordering")) == 2
    assert {e.variation_id for e in ds.episodes} == {0, 1, 2, 3}


def test_load_dataset_arrays(tmp_path):
    variations, splits = build_variations(REACH, 1, seed=4)
    generate_dataset(REACH, variations, 4, 13, tmp_path / "d", splits=splits)
    ds = load_dataset(tmp_path / "d")
    ep = ds.episodes[0]
    assert ep.images.shape == (1, 3, 32, 32, 3)
    assert ep.proprio.shape == (1, 4)
    assert ep.actions.shape == (1, 8)
    assert ep.max_steps == REACH.max_steps
    # targets are canonical: quaternion scalar >= 0, gripper in {0, 1}
    assert np.all(ep.actions[:, 3] >= 0)
    assert set(np.unique(ep.actions[:, 7])) <= {0.0, 1.0}


def test_pretrain_corpus_roundtrip(tmp_path):
    manifest = generate_pretrain_corpus(24, 3, tmp_path / "c")
    assert manifest["pairs"] == 24
    images, captions = load_pretrain_corpus(tmp_path / "c")
    assert images.shape == (24, 32, 32, 3)
    assert len(captions) == 24
    assert all(isinstance(c, str) and c for c in captions)
    # determinism
    generate_pretrain_corpus(24, 3, tmp_path / "c2")
    assert (tmp_path / "c" / "pairs.bin").read_bytes() == (
        tmp_path / "c2" / "pairs.bin"
    ).read_bytes()


def test_dump_episode_ppms(tmp_path):
    rec, ok = rollout_expert(REACH, VariationSpec(colors=(0,)), 21)
    assert ok
    written = dump_episode_ppms(rec, tmp_path / "frames")
    assert len(written) == len(rec.steps) * 3
    for p in written:
        assert p.read_bytes().startswith(b"P6\n32 32\n255\n")


def test_bad_episode_magic(tmp_path):
    p = tmp_path / "bad.bwep"
    p.write_bytes(b"XXXX\x01")
    with pytest.raises(ValueError, match="magic"):
        read_episode(p)
