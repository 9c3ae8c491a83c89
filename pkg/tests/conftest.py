import os

import numpy as np
import pytest
import yaml

from svlb.align import VlmConfig
from svlb.encoders import DecoderConfig, EncoderConfig, HeadToken, Pooling
from svlb.posenc import PositionKind, PositionMode
from svlb.scene import SceneObject, SceneSpec
from svlb.vocab import Vocabulary

TOY_FLAT = {
    "experiment": "toy",
    "seed": 0,
    "data.n_train": 12,
    "data.n_eval": 8,
    "data.canvas": 32,
    "data.rows": 2,
    "data.cols": 2,
    "data.max_objects": 3,
    "data.min_objects": 2,
    "encoder.objective": "clip",
    "encoder.position_mode": "rope2d",
    "encoder.depth": 1,
    "encoder.d_model": 16,
    "encoder.heads": 2,
    "encoder.patch_size": 16,
    "encoder.decoder_depth": 1,
    "text.depth": 1,
    "text.max_len": 20,
    "lm.depth": 1,
    "lm.d_model": 16,
    "lm.heads": 2,
    "pretrain.steps": 3,
    "pretrain.batch": 4,
    "stage1.steps": 3,
    "stage1.batch": 4,
    "stage2.steps": 3,
    "stage2.batch": 4,
    "stage2.lr": 0.001,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def toy_flat(tmp_path):
    flat = dict(TOY_FLAT)
    flat["data.out_dir"] = str(tmp_path / "data")
    flat["paths.runs_dir"] = str(tmp_path / "runs")
    return flat


@pytest.fixture
def write_config(tmp_path, toy_flat):
    def _write(name="toy.yaml", **updates):
        flat = {**toy_flat, **{k.replace("__", "."): v for k, v in updates.items()}}
        path = tmp_path / name
        path.write_text(yaml.safe_dump(flat, sort_keys=True), encoding="utf-8")
        return str(path)
    return _write


@pytest.fixture
def vlm_cfg(vocab):
    enc = EncoderConfig(depth=1, d_model=16, heads=2, head_dim=8, patch_size=8, image_size=16,
                        position_mode=PositionMode(kind=PositionKind.LEARNED_ABS),
                        head_token=HeadToken.CLS, pooling=Pooling.HEAD_TOKEN)
    lm = DecoderConfig(vocab_size=len(vocab), d_model=16, heads=2, depth=1, bos=False)
    return VlmConfig(encoder=enc, lm=lm, max_tokens=3)


@pytest.fixture
def two_object_scene():
    return SceneSpec(canvas=(64, 64), rows=4, cols=4, seed=7, objects=[
        SceneObject(shape="square", color="red", cell=(0, 0), size=12),
        SceneObject(shape="circle", color="blue", cell=(2, 3), size=10),
    ])


@pytest.fixture
def toy_run(write_config, tmp_path):
    """Config path and run directory of a toy run taken through evaluation."""
    from svlb.cli import main

    cfg = write_config()
    for command in ("gen-data", "pretrain-encoder", "align", "evaluate"):
        assert main([command, "--config", cfg]) == 0, command
    return cfg, str(tmp_path / "runs" / "toy")
