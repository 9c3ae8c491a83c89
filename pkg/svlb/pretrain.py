"""Image-encoder pretraining over (image, caption) pairs with a selectable objective."""
from __future__ import annotations
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from svlb.config import Objective, RunConfig
from svlb.dataset import DatasetRecord, iterate_batches
from svlb.encoders import (
    DecoderConfig, EncoderConfig, TextConfig, decode_batch, decoder_shapes, encode_images, encode_texts,
    encoder_shapes, init_params, linear, text_shapes,
)
from svlb.errors import NonFiniteLossError, NumericInputError
from svlb.objectives import (
    CLIP_TEMPERATURE_INIT, SIGLIP_BIAS_INIT, ArBatch, ContrastiveBatch, Siglip2Batch, aim_loss, clip_loss,
    default_prefix_len, ema_update, pixel_loss, siglip2_loss, siglip2_weights, siglip_loss,
)
from svlb.optim import ParamSet, adamw_step, cosine_lr, init_adamw, warmup_steps_for
from svlb.qa import caption
from svlb.scene import scene_hash
from svlb.tensor import Tensor, backward, cross_entropy, exp, mse, no_grad, take
from svlb.vocab import EOA_ID, PAD_ID, Vocabulary

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
CURVE_PARTS = {
    Objective.CLIP: ["contrastive"],
    Objective.SIGLIP: ["sigmoid"],
    Objective.SIGLIP2: ["sigmoid", "distill", "masked", "ar"],
    Objective.AIMV2: ["pixel_mse", "text_ce"],
}


@dataclass
class PretrainModel:
    objective: Objective
    encoder: EncoderConfig
    text: TextConfig
    decoder: DecoderConfig
    params: ParamSet
    teacher: Optional[ParamSet] = None
    prefix_len: Optional[int] = None
    pixel_weight: float = 1.0
    mask_ratio: float = 0.25
    ema_momentum: float = 0.99
    weights: Tuple[float, float, float, float] = (1.0, 0.5, 0.5, 0.5)
    phase_in: bool = False


@dataclass
class PairBatch:
    patches: np.ndarray
    ids: np.ndarray
    pad: np.ndarray


@dataclass
class CurveRow:
    step: int
    lr: float
    loss: float
    parts: Dict[str, float] = field(default_factory=dict)


def pretrain_shapes(objective: Objective, enc: EncoderConfig, txt: TextConfig, dec: DecoderConfig):
    shapes = encoder_shapes(enc, "enc")
    if objective != Objective.AIMV2:
        shapes.update(text_shapes(txt, "txt"))
        shapes["obj.log_temp"] = ()
    if objective in (Objective.SIGLIP, Objective.SIGLIP2):
        shapes["obj.bias"] = ()
    if objective in (Objective.SIGLIP2, Objective.AIMV2):
        shapes.update(decoder_shapes(dec, "dec"))
    if objective == Objective.SIGLIP2:
        shapes["s2.pixel.weight"] = (enc.d_model, enc.patch_dim)
        shapes["s2.pixel.bias"] = (enc.patch_dim,)
    return shapes


def build_model(cfg: RunConfig, vocab: Vocabulary, rng: np.random.Generator) -> PretrainModel:
    e = cfg.encoder
    enc, txt, dec = cfg.encoder_config(), cfg.text_config(len(vocab)), cfg.decoder_config(len(vocab))
    params = init_params(pretrain_shapes(e.objective, enc, txt, dec), rng)
    if "obj.log_temp" in params:
        params["obj.log_temp"].data = np.array(math.log(CLIP_TEMPERATURE_INIT), dtype=params["obj.log_temp"].dtype)
    if "obj.bias" in params:
        params["obj.bias"].data = np.array(SIGLIP_BIAS_INIT, dtype=params["obj.bias"].dtype)
    teacher = None
    if e.objective == Objective.SIGLIP2:
        teacher = params.subset("enc.").copy()
        teacher.set_trainable([])
    return PretrainModel(
        objective=e.objective, encoder=enc, text=txt, decoder=dec, params=params, teacher=teacher,
        prefix_len=e.prefix_len, pixel_weight=e.pixel_weight, mask_ratio=e.mask_ratio,
        ema_momentum=e.ema_momentum, weights=tuple(e.siglip2_weights), phase_in=e.siglip2_phase_in,
    )


def caption_pairs(records: Sequence[DatasetRecord]) -> List[int]:
    """Indices of the first record of each distinct scene."""
    seen, keep = set(), []
    for i, rec in enumerate(records):
        h = scene_hash(rec.scene)
        if h not in seen:
            seen.add(h)
            keep.append(i)
    return keep


def caption_ids(records: Sequence[DatasetRecord], vocab: Vocabulary, max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(records), max_len), PAD_ID, dtype=np.int64)
    for i, rec in enumerate(records):
        seq = vocab.encode(caption(rec.scene)) + [EOA_ID]
        ids[i, :len(seq)] = seq[:max_len]
    return ids, ids == PAD_ID


def _text_targets(batch: PairBatch) -> np.ndarray:
    return np.where(batch.pad, IGNORE_INDEX, batch.ids)


def _contrastive(model: PretrainModel, batch: PairBatch, patches: Tensor):
    p = model.params
    _, img = encode_images(patches, model.encoder, p, "enc")
    txt = encode_texts(batch.ids, batch.pad, model.text, p, "txt")
    return img, txt, exp(p["obj.log_temp"])


def pretrain_loss(model: PretrainModel, batch: PairBatch, step: int, total_steps: int,
                  rng: np.random.Generator) -> Tuple[Tensor, Dict[str, float]]:
    """Loss for one batch and its logged components."""
    p = model.params
    patches = Tensor(batch.patches, dtype=batch.patches.dtype)

    if model.objective == Objective.CLIP:
        img, txt, temp = _contrastive(model, batch, patches)
        loss = clip_loss(ContrastiveBatch(img, txt, temp))
        return loss, {"contrastive": loss.item()}

    if model.objective == Objective.SIGLIP:
        img, txt, temp = _contrastive(model, batch, patches)
        loss = siglip_loss(ContrastiveBatch(img, txt, temp, p["obj.bias"]))
        return loss, {"sigmoid": loss.item()}

    if model.objective == Objective.AIMV2:
        lp = batch.patches.shape[1]
        prefix = model.prefix_len if model.prefix_len is not None else default_prefix_len(lp)
        seq, _ = encode_images(patches, model.encoder, p, "enc", prefix_len=prefix)
        text_logits, patch_preds = decode_batch(seq, batch.ids, batch.pad, model.decoder, p, "dec")
        targets = _text_targets(batch)
        loss = aim_loss(ArBatch(patch_preds, patches, text_logits, targets, prefix, model.pixel_weight, IGNORE_INDEX))
        with no_grad():
            parts = {"pixel_mse": pixel_loss(patch_preds, patches, prefix).item(),
                     "text_ce": cross_entropy(text_logits, targets, ignore_index=IGNORE_INDEX).item()}
        return loss, parts

    b, lp = batch.patches.shape[:2]
    k = max(1, int(round(model.mask_ratio * lp)))
    masked = np.zeros((b, lp), dtype=bool)
    for i in range(b):
        masked[i, rng.permutation(lp)[:k]] = True
    seq, img = encode_images(patches, model.encoder, p, "enc", masked=masked)
    txt = encode_texts(batch.ids, batch.pad, model.text, p, "txt")
    with no_grad():
        teacher_seq, _ = encode_images(patches, model.encoder, model.teacher, "enc")
    offset = seq.shape[1] - lp
    bi, pi = np.nonzero(masked)
    masked_preds = linear(take(seq, (bi, pi + offset)), p, "s2.pixel")
    masked_targets = Tensor(batch.patches[bi, pi], dtype=batch.patches.dtype)
    text_logits, _ = decode_batch(seq, batch.ids, batch.pad, model.decoder, p, "dec")
    targets = _text_targets(batch)
    weights = siglip2_weights(step, total_steps, model.weights, model.phase_in)
    temp, bias = exp(p["obj.log_temp"]), p["obj.bias"]
    loss = siglip2_loss(Siglip2Batch(img, txt, seq, teacher_seq, masked_preds, masked_targets, temp, bias,
                                     weights, text_logits, targets, IGNORE_INDEX))
    with no_grad():
        parts = {
            "sigmoid": siglip_loss(ContrastiveBatch(img, txt, temp, bias)).item(),
            "distill": mse(seq, teacher_seq).item(),
            "masked": mse(masked_preds, masked_targets).item(),
            "ar": cross_entropy(text_logits, targets, ignore_index=IGNORE_INDEX).item(),
        }
    return loss, parts


def pretrain_encoder(cfg: RunConfig, model: PretrainModel, patches: np.ndarray, ids: np.ndarray,
                     pad: np.ndarray) -> List[CurveRow]:
    """Train `model` in place. Raises NonFiniteLossError carrying the last finite parameters."""
    section = cfg.pretrain
    steps = section.steps
    params = model.params
    params.set_trainable(["*"])
    opt = init_adamw(params, weight_decay=section.weight_decay)
    warmup = warmup_steps_for(steps, section.warmup_fraction) if steps else 0
    batch_rng = np.random.default_rng([cfg.seed, 1])
    mask_rng = np.random.default_rng([cfg.seed, 2])
    curve: List[CurveRow] = []
    batches = iterate_batches(len(ids), section.batch, steps, batch_rng)
    for step, idx in enumerate(tqdm(batches, total=steps, desc=f"pretrain {model.objective.value}", leave=False)):
        batch = PairBatch(patches[idx], ids[idx], pad[idx])
        params.zero_grad()
        try:
            loss, parts = pretrain_loss(model, batch, step, steps, mask_rng)
        except NumericInputError:
            raise NonFiniteLossError(step, float("nan"), params.snapshot()) from None
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, value, params.snapshot())
        backward(loss)
        lr = cosine_lr(step, steps, warmup, section.lr)
        adamw_step(params, opt, lr)
        if model.teacher is not None:
            ema_update(model.teacher, params.subset("enc."), model.ema_momentum)
        curve.append(CurveRow(step, lr, value, parts))
        if section.log_every and (step % section.log_every == 0 or step == steps - 1):
            logger.info("pretrain %s step %d/%d loss %.5f", model.objective.value, step + 1, steps, value)
    return curve


def curve_csv(objective: Objective, curve: Sequence[CurveRow]) -> str:
    columns = ["step", "lr", "loss"] + CURVE_PARTS[objective]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in curve:
        writer.writerow([row.step, repr(row.lr), repr(row.loss)] + [repr(row.parts[c]) for c in CURVE_PARTS[objective]])
    return buf.getvalue()
