import json
import os
from collections import Counter

import numpy as np
import pytest

from svlb.dataset import iterate_batches, load_split, make_splits, split_seeds
from svlb.errors import ContractError, MissingArtifactError
from svlb.scene import SceneConfig, scene_hash
from svlb.validators.dataset_validator import KEY_ORDER, validate_jsonl
from svlb.validators.ppm_validator import validate_ppm

TOY_SCENES = SceneConfig(canvas=32, rows=2, cols=2, max_objects=3, min_objects=2)


def _read_tree(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as f:
                out[os.path.relpath(path, root)] = f.read()
    return out


def test_splits_are_valid_and_balanced(tmp_path):
    files = make_splits(10, 9, 0, str(tmp_path), TOY_SCENES)
    assert files.counts == {"train": 10, "eval": 9}
    for split in ("train", "eval"):
        assert validate_jsonl(files.jsonl[split], files.counts[split]) == (True, "ok")
        assert all(validate_ppm(p) == (True, "ok") for p in files.images[split])
        counts = Counter(r.category for r in load_split(files.jsonl[split]))
        assert max(counts.values()) - min(counts.values()) <= 1
    with open(files.jsonl["train"], encoding="utf-8") as f:
        assert list(json.loads(f.readline())) == KEY_ORDER


def test_empty_train_split_is_still_written(tmp_path):
    files = make_splits(0, 4, 0, str(tmp_path), TOY_SCENES)
    assert os.path.getsize(files.jsonl["train"]) == 0
    assert validate_jsonl(files.jsonl["train"], 0) == (True, "ok")
    assert load_split(files.jsonl["train"]) == []


def test_train_and_eval_scenes_are_disjoint(tmp_path):
    # 2x2 grids with few objects collide often, so the regeneration path runs
    files = make_splits(60, 60, 3, str(tmp_path), TOY_SCENES)
    train = {scene_hash(r.scene) for r in load_split(files.jsonl["train"])}
    evals = {scene_hash(r.scene) for r in load_split(files.jsonl["eval"])}
    assert not train & evals


def test_same_seed_same_bytes(tmp_path):
    make_splits(8, 8, 5, str(tmp_path / "a"), TOY_SCENES, threads=1)
    make_splits(8, 8, 5, str(tmp_path / "b"), TOY_SCENES, threads=4)
    make_splits(8, 8, 6, str(tmp_path / "c"), TOY_SCENES)
    a, b, c = (_read_tree(tmp_path / k) for k in "abc")
    assert a == b
    assert a["train.jsonl"] != c["train.jsonl"]


def test_seed_streams_do_not_overlap():
    def take(it, n):
        return [next(it) for _ in range(n)]
    train, evals = take(split_seeds(1, "train"), 1000), take(split_seeds(1, "eval"), 1000)
    assert not set(train) & set(evals)
    assert not set(train) & set(take(split_seeds(2, "train"), 1000))


def test_validator_rejects_reordered_keys(tmp_path):
    files = make_splits(2, 0, 0, str(tmp_path), TOY_SCENES)
    with open(files.jsonl["train"], encoding="utf-8") as f:
        body = json.loads(f.readline())
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(dict(reversed(list(body.items())))) + "\n", encoding="utf-8")
    assert validate_jsonl(str(bad)) == (False, "bad_keys_line_0")
    assert validate_jsonl(files.jsonl["train"], 3) == (False, "expected_3_lines_got_2")
    assert validate_jsonl(str(tmp_path / "none.jsonl")) == (False, "missing_jsonl")


def test_missing_split_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_split(str(tmp_path / "train.jsonl"))


def test_batches_cover_each_epoch_once():
    rng = np.random.default_rng(0)
    batches = list(iterate_batches(10, 5, 4, rng))
    assert [len(b) for b in batches] == [5, 5, 5, 5]
    assert sorted(np.concatenate(batches[:2]).tolist()) == list(range(10))
    assert sorted(np.concatenate(batches[2:]).tolist()) == list(range(10))


def test_batch_larger_than_dataset_is_clamped():
    batches = list(iterate_batches(3, 8, 2, np.random.default_rng(0)))
    assert all(sorted(b.tolist()) == [0, 1, 2] for b in batches)


def test_empty_dataset():
    assert list(iterate_batches(0, 4, 0, np.random.default_rng(0))) == []
    with pytest.raises(ContractError):
        list(iterate_batches(0, 4, 1, np.random.default_rng(0)))
