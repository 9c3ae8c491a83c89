"""Run-directory layout and loading of aligned checkpoints."""
from __future__ import annotations
import os
from typing import Any, Dict, Optional

from svlb.align import Stage, VlmAnswerer, load_vlm
from svlb.checkpoint import load_checkpoint, load_meta
from svlb.config import RunConfig, architecture_hash
from svlb.errors import MissingArtifactError, VocabularyError
from svlb.vocab import Vocabulary

ENCODER_CKPT = "encoder.ckpt"
STAGE_CKPTS = {Stage.PROJECTION_PRETRAIN: "stage1.ckpt", Stage.FULL_FINETUNE: "stage2.ckpt"}
CURVE_FILE = "pretrain_curve.csv"
EVAL_FILE = "eval.json"
LAST_GOOD_SUFFIX = ".last_good.ckpt"


def manifest_path(run_dir: str, command: str) -> str:
    return os.path.join(run_dir, f"{command}.manifest.json")


def checkpoint_meta(cfg: RunConfig, stage: str, step: int, vocab: Vocabulary, **extra: Any) -> Dict[str, Any]:
    return {
        "stage": stage,
        "step": step,
        "objective": cfg.encoder.objective.value,
        "position_mode": cfg.encoder.position_mode.value,
        "vocab_sha256": vocab.fingerprint(),
        **extra,
    }


def check_vocab(meta: Dict[str, Any], vocab: Vocabulary, path: str) -> None:
    if meta.get("vocab_sha256") != vocab.fingerprint():
        raise VocabularyError(f"{path} was trained with a different vocabulary")


def aligned_checkpoint(run_dir: str) -> str:
    """The latest stage checkpoint present in run_dir."""
    for stage in (Stage.FULL_FINETUNE, Stage.PROJECTION_PRETRAIN):
        path = os.path.join(run_dir, STAGE_CKPTS[stage])
        if os.path.exists(path):
            return path
    raise MissingArtifactError(f"no aligned checkpoint in {run_dir}")


def load_answerer(cfg: RunConfig, run_dir: str, force: bool = False, path: Optional[str] = None) -> VlmAnswerer:
    vocab = Vocabulary.default()
    path = path or aligned_checkpoint(run_dir)
    ckpt = load_checkpoint(path, architecture_hash(cfg, "vlm"), force=force)
    check_vocab(load_meta(path), vocab, path)
    vlm_cfg = cfg.vlm_config(len(vocab))
    return VlmAnswerer(load_vlm(ckpt.arrays, vlm_cfg), vlm_cfg, vocab, cfg.precision)
