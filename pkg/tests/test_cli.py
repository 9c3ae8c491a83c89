import glob
import os

import numpy as np
import pytest

from svlb.checkpoint import load_checkpoint, load_meta
from svlb.cli import main
from svlb.config import load_config
from svlb.manifest import read_manifest
from svlb.pretrain import build_model
from svlb.storage import read_json
from svlb.tensor import precision
from svlb.vocab import Vocabulary


def _bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_gen_data_hash_is_stable_and_seed_sensitive(write_config, tmp_path, capsys):
    cfg = write_config()
    hashes = []
    for out, seed in (("a", "0"), ("b", "0"), ("c", "1")):
        assert main(["gen-data", "--config", cfg, "--seed", seed, "--out", str(tmp_path / out)]) == 0
        hashes.append(capsys.readouterr().out.strip())
    assert hashes[0] == hashes[1] != hashes[2]
    manifest = read_manifest(str(tmp_path / "a" / "manifest.json"))
    assert manifest.content_hash == hashes[0]
    assert manifest.counts == {"train": 12, "eval": 8}
    assert sum(a.primary for a in manifest.artifacts) == 2
    assert sum(a.kind == "ppm" for a in manifest.artifacts) == 20
    assert len(glob.glob(str(tmp_path / "a" / "images" / "train" / "*.ppm"))) == 12
    assert manifest.seed == 0 and manifest.config["n_train"] == 12


def test_full_pipeline(toy_run, tmp_path, capsys):
    cfg, run_dir = toy_run
    for name in ("encoder.ckpt", "stage1.ckpt", "stage2.ckpt", "pretrain_curve.csv", "eval.json",
                 "pretrain-encoder.manifest.json", "align.manifest.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    meta = load_meta(os.path.join(run_dir, "stage2.ckpt"))
    assert meta["stage"] == "full_finetune"
    assert meta["encoder_config_hash"] == load_checkpoint(os.path.join(run_dir, "encoder.ckpt")).config_hash_hex
    result = read_json(os.path.join(run_dir, "eval.json"))
    assert result["variant"] == "LLaVA-CLIP-2D-RoPE"
    assert result["totals"]["overall"] == 8
    assert 0.0 <= result["overall"] <= 1.0
    capsys.readouterr()

    out = tmp_path / "report"
    assert main(["grid-report", "--config", str(tmp_path / "*.yaml"), "--out", str(out)]) == 0
    assert "LLaVA-CLIP-2D-RoPE" in capsys.readouterr().out
    for name in ("report.csv", "report.txt", "report.xlsx", "report.html"):
        assert os.path.getsize(out / name) > 0
    first = {n: _bytes(out / n) for n in ("report.csv", "report.txt", "report.html")}
    assert main(["grid-report", "--config", str(tmp_path / "*.yaml"), "--out", str(out)]) == 0
    assert first == {n: _bytes(out / n) for n in first}

    image = sorted(glob.glob(str(tmp_path / "data" / "images" / "eval" / "*.ppm")))[0]
    capsys.readouterr()
    assert main(["ask", "--config", cfg, "--image", image, "--question", "is there a red square ?"]) == 0
    answer = capsys.readouterr().out.strip()
    vocab = Vocabulary.default()
    assert all(word in vocab.index for word in answer.split())


def test_pretraining_is_reproducible(write_config, tmp_path):
    cfg = write_config()
    assert main(["gen-data", "--config", cfg]) == 0
    for out in ("r1", "r2"):
        for command in ("pretrain-encoder", "align"):
            assert main([command, "--config", cfg, "--out", str(tmp_path / out)]) == 0
    for name in ("encoder.ckpt", "pretrain_curve.csv", "stage1.ckpt", "stage2.ckpt", "align.manifest.json",
                 "pretrain-encoder.manifest.json"):
        assert _bytes(tmp_path / "r1" / name) == _bytes(tmp_path / "r2" / name)


def test_zero_pretraining_steps_write_the_initialization(write_config, tmp_path):
    cfg_path = write_config(pretrain__steps=0)
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert main(["pretrain-encoder", "--config", cfg_path]) == 0
    cfg = load_config(cfg_path)
    with precision(cfg.precision):
        init = build_model(cfg, Vocabulary.default(), np.random.default_rng([cfg.seed, 0])).params.snapshot()
    saved = load_checkpoint(str(tmp_path / "runs" / "toy" / "encoder.ckpt")).arrays
    assert sorted(saved) == sorted(init)
    assert all(saved[k].tobytes() == init[k].tobytes() for k in init)


def test_aimv2_curve_columns(write_config, tmp_path):
    cfg = write_config(encoder__objective="aimv2")
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["pretrain-encoder", "--config", cfg]) == 0
    with open(tmp_path / "runs" / "toy" / "pretrain_curve.csv", encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == "step,lr,loss,pixel_mse,text_ce"
    assert len(lines) == 4


def test_stage1_only(write_config, tmp_path):
    cfg = write_config()
    for command in (["gen-data"], ["pretrain-encoder"], ["align", "--stage1-only"], ["evaluate"]):
        assert main([command[0], "--config", cfg] + command[1:]) == 0
    run_dir = tmp_path / "runs" / "toy"
    assert (run_dir / "stage1.ckpt").exists() and not (run_dir / "stage2.ckpt").exists()
    encoder = load_checkpoint(str(run_dir / "encoder.ckpt")).arrays
    aligned = load_checkpoint(str(run_dir / "stage1.ckpt")).arrays
    assert all(aligned[k].tobytes() == encoder[k].tobytes() for k in aligned if k.startswith("enc."))
    assert (run_dir / "eval.json").exists()


def test_missing_encoder_exits_2_without_outputs(write_config, tmp_path):
    cfg = write_config()
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["align", "--config", cfg]) == 2
    assert not (tmp_path / "runs" / "toy").exists()
    assert main(["evaluate", "--config", cfg]) == 2


def test_missing_data_exits_2(write_config):
    assert main(["pretrain-encoder", "--config", write_config()]) == 2


def test_encoder_from_another_architecture_is_refused(write_config, tmp_path):
    cfg = write_config()
    other = write_config("other.yaml", encoder__depth=2, experiment="other")
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["pretrain-encoder", "--config", other]) == 0
    encoder = str(tmp_path / "runs" / "other" / "encoder.ckpt")
    assert main(["align", "--config", cfg, "--encoder", encoder]) == 1
    assert not (tmp_path / "runs" / "toy" / "stage1.ckpt").exists()


def test_invalid_config_exits_1(write_config, tmp_path):
    assert main(["gen-data", "--config", write_config(encoder__d_model=30)]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert not (tmp_path / "data").exists()


def test_empty_grid_exits_3(write_config, tmp_path):
    write_config()
    assert main(["grid-report", "--config", str(tmp_path / "*.yaml"), "--out", str(tmp_path / "r")]) == 3
    assert not (tmp_path / "r" / "report.csv").exists()


def test_ask_rejects_a_bad_image(toy_run, tmp_path):
    cfg, _ = toy_run
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    assert main(["ask", "--config", cfg, "--image", str(bad), "--question", "is there a red square ?"]) == 1


def test_verify_passes(capsys):
    assert main(["verify", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "grad:matmul" in out and "rope2d:relative" in out
    assert "FAIL" not in out


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train-everything"])
    assert exc.value.code == 2


def test_unwritable_output_exits_1(write_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    assert main(["gen-data", "--config", write_config(), "--out", str(blocker / "data")]) == 1
