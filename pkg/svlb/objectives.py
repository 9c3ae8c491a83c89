"""Encoder pretraining losses: softmax contrastive, pairwise sigmoid, autoregressive
patch+text, and the simplified SigLIP2 composite. Also the EMA teacher update."""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from svlb.errors import ContractError, DimensionError
from svlb.optim import ParamSet
from svlb.tensor import (
    Tensor, add, as_tensor, cross_entropy, div, l2_normalize, log_sigmoid, matmul, mse, mul, sum_, take,
    transpose,
)

Scalar = Union[float, Tensor]

CLIP_TEMPERATURE_INIT = 0.07
SIGLIP_BIAS_INIT = -10.0
SIGLIP2_WEIGHTS = (1.0, 0.5, 0.5, 0.5)


@dataclass
class ContrastiveBatch:
    img_emb: Tensor
    txt_emb: Tensor
    temperature: Scalar = CLIP_TEMPERATURE_INIT
    bias: Scalar = 0.0


@dataclass
class ArBatch:
    patch_preds: Optional[Tensor]
    patch_targets: Optional[Tensor]
    text_logits: Optional[Tensor]
    text_targets: Optional[np.ndarray]
    prefix_len: int = 0
    pixel_weight: float = 1.0
    ignore_index: int = -100


@dataclass
class Siglip2Batch:
    img_emb: Tensor
    txt_emb: Tensor
    student_feats: Tensor
    teacher_feats: Tensor
    masked_preds: Optional[Tensor]
    masked_targets: Optional[Tensor]
    temperature: Scalar = CLIP_TEMPERATURE_INIT
    bias: Scalar = SIGLIP_BIAS_INIT
    weights: Tuple[float, float, float, float] = SIGLIP2_WEIGHTS
    text_logits: Optional[Tensor] = None
    text_targets: Optional[np.ndarray] = None
    ignore_index: int = -100


def default_prefix_len(n_patches: int) -> int:
    return math.ceil(n_patches / 3)


def similarity_logits(img_emb: Tensor, txt_emb: Tensor, temperature: Scalar) -> Tensor:
    if img_emb.ndim != 2 or img_emb.shape != txt_emb.shape or img_emb.shape[0] < 1:
        raise DimensionError("similarity", img_emb.shape, txt_emb.shape)
    sim = matmul(l2_normalize(img_emb), transpose(l2_normalize(txt_emb)))
    return div(sim, temperature)


def clip_loss(batch: ContrastiveBatch) -> Tensor:
    logits = similarity_logits(batch.img_emb, batch.txt_emb, batch.temperature)
    targets = np.arange(logits.shape[0])
    return mul(add(cross_entropy(logits, targets), cross_entropy(transpose(logits), targets)), 0.5)


def siglip_loss(batch: ContrastiveBatch) -> Tensor:
    logits = add(similarity_logits(batch.img_emb, batch.txt_emb, batch.temperature), batch.bias)
    n = logits.shape[0]
    signs = 2.0 * np.eye(n) - 1.0
    return mul(sum_(log_sigmoid(mul(logits, signs))), -1.0 / n)


def pixel_loss(patch_preds: Tensor, patch_targets: Tensor, prefix_len: int) -> Tensor:
    """MSE over patch positions >= prefix_len; positions are the second-to-last axis."""
    if patch_preds.shape != patch_targets.shape:
        raise DimensionError("aim_loss", patch_preds.shape, patch_targets.shape)
    lv = patch_preds.shape[-2]
    if prefix_len > lv or prefix_len < 0:
        raise ContractError(f"prefix_len {prefix_len} outside [0, {lv}]")
    if prefix_len == lv:
        return mul(sum_(patch_preds), 0.0)
    idx = (slice(None),) * (patch_preds.ndim - 2) + (slice(prefix_len, None),)
    return mse(take(patch_preds, idx), take(as_tensor(patch_targets, patch_preds), idx))


def aim_loss(batch: ArBatch) -> Tensor:
    terms = []
    if batch.patch_preds is not None:
        terms.append(mul(pixel_loss(batch.patch_preds, batch.patch_targets, batch.prefix_len), batch.pixel_weight))
    if batch.text_logits is not None:
        terms.append(cross_entropy(batch.text_logits, batch.text_targets, ignore_index=batch.ignore_index))
    if not terms:
        raise ContractError("aim_loss needs patch predictions or text logits")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def siglip2_loss(batch: Siglip2Batch) -> Tensor:
    w_sig, w_distill, w_masked, w_ar = batch.weights
    if any(not math.isfinite(w) or w < 0 for w in batch.weights):
        raise ContractError(f"SigLIP2 weights must be finite and non-negative, got {batch.weights}")
    total = mul(siglip_loss(ContrastiveBatch(batch.img_emb, batch.txt_emb, batch.temperature, batch.bias)), w_sig)
    # zero-weighted terms stay in the graph so their heads still receive (zero) gradients
    total = add(total, mul(mse(batch.student_feats, batch.teacher_feats.detach()), w_distill))
    if batch.masked_preds is not None:
        total = add(total, mul(mse(batch.masked_preds, batch.masked_targets), w_masked))
    if batch.text_logits is not None:
        ar = aim_loss(ArBatch(None, None, batch.text_logits, batch.text_targets, ignore_index=batch.ignore_index))
        total = add(total, mul(ar, w_ar))
    return total


def siglip2_weights(step: int, total_steps: int, weights=SIGLIP2_WEIGHTS, phase_in: bool = False,
                    dense_fraction: float = 0.2) -> Tuple[float, float, float, float]:
    """With phase_in, the distillation and masked terms switch on for the final `dense_fraction` of steps."""
    if not phase_in or step >= total_steps * (1.0 - dense_fraction):
        return tuple(weights)
    return (weights[0], 0.0, 0.0, weights[3])


def ema_update(teacher: ParamSet, student: ParamSet, momentum: float) -> ParamSet:
    if teacher.names() != student.names():
        raise ContractError("teacher and student parameter names differ")
    for name in teacher.names():
        t, s = teacher[name], student[name]
        if t.shape != s.shape:
            raise ContractError(f"teacher/student shape mismatch on {name!r}: {t.shape} vs {s.shape}")
        t.data = np.ascontiguousarray((momentum * t.data + (1.0 - momentum) * s.data).astype(t.dtype))
        t.requires_grad = False
        t.grad = None
    return teacher
