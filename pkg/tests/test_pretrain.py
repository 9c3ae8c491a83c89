import math

import numpy as np
import pytest

from svlb.align import images_to_patches
from svlb.config import Objective, parse_config
from svlb.dataset import DatasetRecord
from svlb.pretrain import CURVE_PARTS, build_model, caption_ids, caption_pairs, curve_csv, pretrain_encoder
from svlb.qa import Category, gen_qa
from svlb.scene import gen_scene, render
from svlb.vocab import EOA_ID, PAD_ID


def _records(cfg, n):
    out = []
    for seed in range(n):
        qa = gen_qa(gen_scene(seed, cfg.scene_config()), Category.COUNT, seed)
        out.append(DatasetRecord(scene=qa.scene, category=qa.category, question=qa.question, answer=qa.answer,
                                 image_path=f"images/train/{seed:06d}.ppm"))
    return out


def _inputs(cfg, vocab, n=6):
    records = _records(cfg, n)
    patches = images_to_patches([render(r.scene) for r in records], cfg.encoder.patch_size)
    ids, pad = caption_ids(records, vocab, cfg.text.max_len)
    return patches, ids, pad


def test_caption_pairs_keep_first_of_each_scene(toy_flat):
    cfg = parse_config(toy_flat)
    records = _records(cfg, 3)
    doubled = [records[0], records[1], records[0], records[2], records[1]]
    assert caption_pairs(doubled) == [0, 1, 3]


def test_caption_ids_end_with_eoa(toy_flat, vocab):
    cfg = parse_config(toy_flat)
    records = _records(cfg, 2)
    ids, pad = caption_ids(records, vocab, cfg.text.max_len)
    assert ids.shape == (2, cfg.text.max_len)
    for row, mask in zip(ids, pad):
        n = int((~mask).sum())
        assert row[n - 1] == EOA_ID
        assert np.all(row[n:] == PAD_ID)


@pytest.mark.parametrize("objective", list(Objective))
def test_short_run_logs_every_component(toy_flat, vocab, objective):
    cfg = parse_config({**toy_flat, "encoder.objective": objective.value})
    model = build_model(cfg, vocab, np.random.default_rng(0))
    patches, ids, pad = _inputs(cfg, vocab)
    before = model.params.snapshot()
    curve = pretrain_encoder(cfg, model, patches, ids, pad)
    assert len(curve) == cfg.pretrain.steps
    for row in curve:
        assert math.isfinite(row.loss)
        assert sorted(row.parts) == sorted(CURVE_PARTS[objective])
    after = model.params.snapshot()
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    header = curve_csv(objective, curve).splitlines()[0].split(",")
    assert header == ["step", "lr", "loss"] + CURVE_PARTS[objective]


def test_aimv2_has_no_text_tower(toy_flat, vocab):
    model = build_model(parse_config({**toy_flat, "encoder.objective": "aimv2"}), vocab, np.random.default_rng(0))
    names = model.params.names()
    assert not any(n.startswith("txt.") for n in names)
    assert any(n.startswith("dec.") for n in names)
    assert model.teacher is None


def test_siglip2_teacher_follows_student(toy_flat, vocab):
    cfg = parse_config({**toy_flat, "encoder.objective": "siglip2", "encoder.ema_momentum": 0.5})
    model = build_model(cfg, vocab, np.random.default_rng(0))
    start = model.teacher.snapshot()
    pretrain_encoder(cfg, model, *_inputs(cfg, vocab))
    moved = model.teacher.snapshot()
    assert any(not np.array_equal(start[k], moved[k]) for k in start)
    assert all(not model.teacher[k].requires_grad for k in model.teacher.names())


def test_zero_steps_leave_initialization(toy_flat, vocab):
    cfg = parse_config({**toy_flat, "pretrain.steps": 0})
    model = build_model(cfg, vocab, np.random.default_rng(0))
    fresh = build_model(cfg, vocab, np.random.default_rng(0)).params.snapshot()
    assert pretrain_encoder(cfg, model, *_inputs(cfg, vocab)) == []
    after = model.params.snapshot()
    assert all(after[k].tobytes() == fresh[k].tobytes() for k in fresh)


@pytest.mark.slow
def test_clip_loss_decreases(toy_flat, vocab):
    cfg = parse_config({**toy_flat, "pretrain.steps": 200, "pretrain.batch": 32, "pretrain.log_every": 50})
    model = build_model(cfg, vocab, np.random.default_rng(0))
    curve = pretrain_encoder(cfg, model, *_inputs(cfg, vocab, n=32))
    assert curve[-1].loss < curve[0].loss
