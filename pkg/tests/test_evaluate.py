import os

import numpy as np
import pytest

from svlb.dataset import DatasetRecord, load_images, load_split, make_splits
from svlb.evaluate import evaluate, normalize_answer, score
from svlb.qa import Category, gen_qa
from svlb.scene import SceneConfig, gen_scene

TOY_SCENES = SceneConfig(canvas=32, rows=2, cols=2, max_objects=3, min_objects=2)


class LookupAnswerer:
    """Answers from the ground truth, keyed on the exact pixels and question."""

    def __init__(self, eval_file):
        records = load_split(eval_file)
        images = load_images(records, os.path.dirname(eval_file))
        self.table = {(img.tobytes(), r.question): r.answer for img, r in zip(images, records)}

    def answer(self, image, question):
        return "  " + self.table[(image.tobytes(), question)].upper()


class ConstantAnswerer:
    def __init__(self, text):
        self.text = text

    def answer(self, image, question):
        return self.text


@pytest.fixture
def eval_file(tmp_path):
    return make_splits(0, 24, 1, str(tmp_path), TOY_SCENES).jsonl["eval"]


def _records(category, n):
    out, seed = [], 0
    while len(out) < n:
        qa = gen_qa(gen_scene(seed, SceneConfig()), category, seed)
        seed += 1
        if qa is not None:
            out.append(DatasetRecord(scene=qa.scene, category=qa.category, question=qa.question,
                                     answer=qa.answer, image_path="unused.ppm"))
    return out


def test_oracle_scores_one(eval_file):
    row = evaluate(LookupAnswerer(eval_file), eval_file, variant="oracle")
    assert row.overall == 1.0
    assert all(getattr(row, c.value) == 1.0 for c in Category)
    assert row.totals["overall"] == 24


def test_empty_answers_score_zero(eval_file):
    row = evaluate(ConstantAnswerer(""), eval_file)
    assert row.overall == 0.0
    assert row.totals == {"relation_lr": 6, "relation_ab": 6, "count": 6, "existence": 6, "overall": 24}


def test_threaded_evaluation_keeps_record_order(eval_file):
    model = LookupAnswerer(eval_file)
    assert evaluate(model, eval_file, threads=1) == evaluate(model, eval_file, threads=4)


def test_random_guessing_on_binary_relation_is_near_half():
    records = _records(Category.RELATION_LR, 2000)
    rng = np.random.default_rng(0)
    guesses = [("left", "right")[int(rng.integers(2))] for _ in records]
    row = score(records, guesses)
    assert abs(row.relation_lr - 0.5) <= 0.05
    assert row.count == 0.0 and row.totals["count"] == 0


def test_answers_are_normalized():
    assert normalize_answer("  Left\t") == "left"
    records = _records(Category.EXISTENCE, 3)
    row = score(records, [" " + r.answer.upper() + " " for r in records])
    assert row.existence == 1.0 and row.overall == 1.0


def test_prediction_count_must_match():
    with pytest.raises(ValueError):
        score(_records(Category.COUNT, 2), ["1"])
