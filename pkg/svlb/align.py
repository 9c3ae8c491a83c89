"""Visual projection, sequence assembly, answer-only language loss and the two training stages.

The language model is a causal decoder over [H_v ‖ embed(question) ‖ embed(answer + <eoa>)].
Logits at position p predict token p+1; only answer positions carry targets.
"""
from __future__ import annotations
import fnmatch
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm

from svlb.dataset import iterate_batches
from svlb.encoders import (
    DecoderConfig, EncoderConfig, TokenSequence, causal_trunk, check_shapes, decoder_shapes, encode_images,
    encoder_shapes, init_params, linear, patchify,
)
from svlb.errors import CompatibilityError, ConfigurationError, ContractError, NonFiniteLossError, NumericInputError
from svlb.optim import OptimizerState, ParamSet, adamw_step, cosine_lr, init_adamw, warmup_steps_for
from svlb.scene import to_unit
from svlb.tensor import (
    Tensor, add, backward, concat, cross_entropy, default_dtype, embedding, matmul, mul, no_grad, precision, reshape,
    take,
)
from svlb.vocab import EOA_ID, PAD_ID, Vocabulary

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
PROJECTION_PATTERNS = ["proj.*"]


class Stage(str, Enum):
    PROJECTION_PRETRAIN = "projection_pretrain"
    FULL_FINETUNE = "full_finetune"


class TrainStageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    stage: Stage
    lr_max: float
    global_batch: int
    steps: int
    trainable: List[str]
    warmup_fraction: float = 0.03
    weight_decay: float = 0.0
    micro_batch: Optional[int] = None
    log_every: int = 10

    @model_validator(mode="after")
    def _check(self) -> "TrainStageConfig":
        if self.stage == Stage.PROJECTION_PRETRAIN and self.trainable != PROJECTION_PATTERNS:
            raise ValueError(f"projection pretraining trains exactly {PROJECTION_PATTERNS}, got {self.trainable}")
        if self.micro_batch is not None and self.global_batch % self.micro_batch:
            raise ValueError("micro_batch must divide global_batch")
        return self

    @classmethod
    def projection_pretrain(cls, steps: int, global_batch: int, lr_max: float = 1e-3, **kw) -> "TrainStageConfig":
        return cls(stage=Stage.PROJECTION_PRETRAIN, lr_max=lr_max, global_batch=global_batch, steps=steps,
                   trainable=list(PROJECTION_PATTERNS), **kw)

    @classmethod
    def full_finetune(cls, steps: int, global_batch: int, lr_max: float = 2e-5, **kw) -> "TrainStageConfig":
        return cls(stage=Stage.FULL_FINETUNE, lr_max=lr_max, global_batch=global_batch, steps=steps,
                   trainable=["*"], **kw)


class VlmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    encoder: EncoderConfig
    lm: DecoderConfig
    max_tokens: int = 4

    @model_validator(mode="after")
    def _check(self) -> "VlmConfig":
        if self.lm.bos or self.lm.patch_dim:
            raise ValueError("the language model takes no bos token and no pixel head")
        return self


@dataclass
class ProjectionLayer:
    weight: Tensor
    bias: Tensor

    @classmethod
    def from_params(cls, params: ParamSet) -> "ProjectionLayer":
        layer = cls(params["proj.weight"], params["proj.bias"])
        if not (np.all(np.isfinite(layer.weight.data)) and np.all(np.isfinite(layer.bias.data))):
            raise ContractError("projection has non-finite entries")
        return layer


@dataclass
class AlignedSequence:
    embeddings: Tensor
    loss_mask: np.ndarray
    boundary: int
    ids: np.ndarray

    def targets(self, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
        """Next-token targets: position p is supervised with ids[p+1] when p+1 is an answer position."""
        out = np.full(self.ids.shape, ignore_index, dtype=np.int64)
        nxt = self.loss_mask[1:]
        out[:-1][nxt] = self.ids[1:][nxt]
        return out


@dataclass
class VlmBatch:
    """Right-padded text; `answer` marks answer tokens (including <eoa>)."""
    patches: np.ndarray
    ids: np.ndarray
    pad: np.ndarray
    answer: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_answer_tokens(self) -> int:
        return int(self.answer.sum())

    def select(self, idx) -> "VlmBatch":
        return VlmBatch(self.patches[idx], self.ids[idx], self.pad[idx], self.answer[idx])


# shapes and parameters

def projection_shapes(d_enc: int, d_lm: int):
    return {"proj.weight": (d_enc, d_lm), "proj.bias": (d_lm,)}


def vlm_shapes(cfg: VlmConfig):
    shapes = encoder_shapes(cfg.encoder, "enc")
    shapes.update(projection_shapes(cfg.encoder.d_model, cfg.lm.d_model))
    shapes.update(decoder_shapes(cfg.lm, "lm"))
    return shapes


def init_vlm(cfg: VlmConfig, rng: np.random.Generator, encoder: Optional[ParamSet] = None) -> ParamSet:
    """Fresh projection and language model; the encoder is taken from `encoder` when given."""
    params = ParamSet()
    enc_shapes = encoder_shapes(cfg.encoder, "enc")
    if encoder is None:
        init_params(enc_shapes, rng, params)
    else:
        for name, shape in sorted(enc_shapes.items()):
            if name not in encoder:
                raise CompatibilityError(f"encoder checkpoint lacks parameter {name!r}")
            if encoder[name].shape != tuple(shape):
                raise CompatibilityError(
                    f"encoder parameter {name!r} has shape {encoder[name].shape}, expected {tuple(shape)}")
            params.add(name, Tensor(encoder[name].data.copy(), dtype=encoder[name].dtype))
    init_params(projection_shapes(cfg.encoder.d_model, cfg.lm.d_model), rng, params)
    init_params(decoder_shapes(cfg.lm, "lm"), rng, params)
    return params


def load_vlm(arrays, cfg: VlmConfig) -> ParamSet:
    params = ParamSet.from_arrays(arrays)
    try:
        check_shapes(params, vlm_shapes(cfg))
    except ConfigurationError as exc:
        raise CompatibilityError(str(exc)) from None
    return params


# forward pieces

def project_visual(seq_features: Tensor, proj: ProjectionLayer) -> Tensor:
    if seq_features.shape[-1] != proj.weight.shape[0] or proj.bias.shape != (proj.weight.shape[1],):
        raise ConfigurationError(
            f"projection expects width {proj.weight.shape[0]}, got features of shape {seq_features.shape}")
    return add(matmul(seq_features, proj.weight), proj.bias)


def build_sequence(h_v: Tensor, instruction: TokenSequence, answer: TokenSequence, embed_table: Tensor) -> AlignedSequence:
    if len(answer) == 0:
        raise ContractError("answer must contain at least one token")
    if h_v.ndim != 2 or h_v.shape[-1] != embed_table.shape[-1]:
        raise ConfigurationError(f"visual tokens {h_v.shape} do not match embedding width {embed_table.shape[-1]}")
    lv, lq, la = h_v.shape[0], len(instruction), len(answer)
    parts = [h_v]
    if lq:
        parts.append(embedding(embed_table, instruction.ids))
    parts.append(embedding(embed_table, answer.ids))
    mask = np.concatenate([np.zeros(lv + lq, dtype=bool), np.ones(la, dtype=bool)])
    ids = np.concatenate([np.full(lv, IGNORE_INDEX, dtype=np.int64), instruction.ids, answer.ids])
    return AlignedSequence(concat(parts, axis=0), mask, lv, ids)


def encode_qa(vocab: Vocabulary, question: str, answer: Optional[str]) -> TokenSequence:
    q = vocab.encode(question)
    a = [] if answer is None else vocab.encode(answer) + [EOA_ID]
    return TokenSequence(np.array(q + a, dtype=np.int64),
                         answer_mask=np.array([False] * len(q) + [True] * len(a), dtype=bool))


def images_to_patches(images: Sequence[np.ndarray], patch_size: int) -> np.ndarray:
    """uint8 rasters -> [N, hp*wp, patch_dim] in the active precision."""
    out = [patchify(to_unit(img).astype(default_dtype()), patch_size).tokens.data for img in images]
    return np.stack(out) if out else np.zeros((0, 0, 3 * patch_size * patch_size), dtype=default_dtype())


def make_batch(patches: np.ndarray, sequences: Sequence[TokenSequence]) -> VlmBatch:
    lt = max((len(s) for s in sequences), default=0)
    n = len(sequences)
    ids = np.full((n, lt), PAD_ID, dtype=np.int64)
    pad = np.ones((n, lt), dtype=bool)
    answer = np.zeros((n, lt), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = s.ids
        pad[i, :len(s)] = False
        answer[i, :len(s)] = s.answer_mask
    return VlmBatch(np.asarray(patches), ids, pad, answer)


def vlm_logits(batch: VlmBatch, params: ParamSet, cfg: VlmConfig) -> Tensor:
    """Logits [B, Lt, V]; entry t predicts text token t."""
    seq, _ = encode_images(Tensor(batch.patches, dtype=batch.patches.dtype), cfg.encoder, params, "enc")
    h_v = project_visual(seq, ProjectionLayer.from_params(params))
    b, lv = h_v.shape[0], h_v.shape[1]
    lt = batch.ids.shape[1]
    x = concat([h_v, embedding(params["lm.embed"], batch.ids)], axis=1)
    pad = np.concatenate([np.zeros((b, lv), dtype=bool), batch.pad], axis=1)
    h = causal_trunk(x, pad, cfg.lm, params, "lm")
    return linear(take(h, (slice(None), slice(lv - 1, lv + lt - 1))), params, "lm.head")


def vlm_loss(batch: VlmBatch, params: ParamSet, cfg: VlmConfig, reduction: str = "mean") -> Tensor:
    targets = np.where(batch.answer, batch.ids, IGNORE_INDEX)
    return cross_entropy(vlm_logits(batch, params, cfg), targets, ignore_index=IGNORE_INDEX, reduction=reduction)


# training

def accumulate_gradients(micro_batches: Sequence[VlmBatch], params: ParamSet, cfg: VlmConfig) -> float:
    """Backpropagate summed losses scaled by the global answer-token count.

    The accumulated gradient equals that of the mean loss over the union of the micro-batches.
    Returns that mean loss.
    """
    total = sum(mb.n_answer_tokens for mb in micro_batches)
    if total == 0:
        raise ContractError("no answer tokens in batch")
    loss_sum = 0.0
    for mb in micro_batches:
        if mb.n_answer_tokens == 0:
            continue
        loss = vlm_loss(mb, params, cfg, reduction="sum")
        loss_sum += loss.item()
        backward(mul(loss, 1.0 / total))
    return loss_sum / total


def split_batch(batch: VlmBatch, micro_batch: Optional[int]) -> List[VlmBatch]:
    if not micro_batch or micro_batch >= len(batch):
        return [batch]
    return [batch.select(slice(i, i + micro_batch)) for i in range(0, len(batch), micro_batch)]


def _check_mask(params: ParamSet, stage: TrainStageConfig) -> None:
    expected = [n for n in params.names() if any(fnmatch.fnmatchcase(n, p) for p in stage.trainable)]
    if params.trainable_names() != expected:
        raise ContractError(f"trainable mask does not match stage {stage.stage.value}")


def vlm_step(batch: Union[VlmBatch, Sequence[VlmBatch]], stage: TrainStageConfig, params: ParamSet,
             opt: OptimizerState, step: int, cfg: VlmConfig) -> float:
    _check_mask(params, stage)
    micro = split_batch(batch, stage.micro_batch) if isinstance(batch, VlmBatch) else list(batch)
    params.zero_grad()
    try:
        loss = accumulate_gradients(micro, params, cfg)
    except NumericInputError:
        raise NonFiniteLossError(step, float("nan"), params.snapshot()) from None
    if not math.isfinite(loss):
        raise NonFiniteLossError(step, loss, params.snapshot())
    lr = cosine_lr(step, stage.steps, warmup_steps_for(stage.steps, stage.warmup_fraction), stage.lr_max)
    adamw_step(params, opt, lr)
    return loss


def train_stage(stage: TrainStageConfig, params: ParamSet, patches: np.ndarray, sequences: Sequence[TokenSequence],
                cfg: VlmConfig, rng: np.random.Generator,
                on_step: Optional[Callable[[int, float], None]] = None) -> List[float]:
    params.set_trainable(stage.trainable)
    opt = init_adamw(params, weight_decay=stage.weight_decay)
    losses: List[float] = []
    batches = iterate_batches(len(sequences), stage.global_batch, stage.steps, rng)
    for step, idx in enumerate(tqdm(batches, total=stage.steps, desc=stage.stage.value, leave=False)):
        batch = make_batch(patches[idx], [sequences[i] for i in idx])
        loss = vlm_step(batch, stage, params, opt, step, cfg)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
        if stage.log_every and (step % stage.log_every == 0 or step == stage.steps - 1):
            logger.info("%s step %d/%d loss %.5f", stage.stage.value, step + 1, stage.steps, loss)
    return losses


# inference

def generate(image: np.ndarray, instruction: str, params: ParamSet, cfg: VlmConfig, vocab: Vocabulary,
             max_tokens: Optional[int] = None) -> str:
    """Greedy decoding until <eoa> or max_tokens."""
    max_tokens = cfg.max_tokens if max_tokens is None else max_tokens
    if max_tokens <= 0:
        return ""
    prompt = vocab.encode(instruction)
    with no_grad():
        patches = images_to_patches([image], cfg.encoder.patch_size)
        seq, _ = encode_images(Tensor(patches, dtype=patches.dtype), cfg.encoder, params, "enc")
        h_v = reshape(project_visual(seq, ProjectionLayer.from_params(params)), (seq.shape[1], cfg.lm.d_model))
        out: List[int] = []
        for _ in range(max_tokens):
            ids = np.array(prompt + out, dtype=np.int64)
            x = concat([h_v, embedding(params["lm.embed"], ids)], axis=0) if len(ids) else h_v
            h = causal_trunk(reshape(x, (1,) + x.shape), None, cfg.lm, params, "lm")
            logits = linear(take(h, (slice(None), slice(-1, None))), params, "lm.head")
            nxt = int(np.argmax(logits.data))
            if nxt == EOA_ID:
                break
            out.append(nxt)
    return vocab.decode(out)


class VlmAnswerer:
    """Read-only wrapper used by evaluation workers; precision is re-entered per call since it is thread-local."""

    def __init__(self, params: ParamSet, cfg: VlmConfig, vocab: Vocabulary, precision_mode: str = "verify") -> None:
        self.params = params
        self.cfg = cfg
        self.vocab = vocab
        self.precision_mode = precision_mode

    def answer(self, image: np.ndarray, question: str) -> str:
        with precision(self.precision_mode):
            return generate(image, question, self.params, self.cfg, self.vocab)
