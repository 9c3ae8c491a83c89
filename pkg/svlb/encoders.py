"""Patchification, the vision transformer, the text tower and the causal multimodal decoder.

All networks are functional: a config, a ParamSet and an input. Parameter names
are dotted and prefixed by the tower they belong to (`enc.`, `txt.`, `dec.`,
`lm.`). `*_shapes` functions are the single source of truth for parameter
shapes; they drive initialization and compatibility checks.

Decoder layout is [bos ‖ visual ‖ text]. Patch prediction i is read at sequence
position i and text logits t at position Lv + t, so prediction i only sees
visual tokens < i and text logits t see all visual tokens and text tokens < t.
"""
from __future__ import annotations
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from svlb.errors import ConfigurationError, ContractError, DimensionError
from svlb.optim import ParamSet
from svlb.posenc import PositionKind, PositionMode, apply_rope1d, apply_rope2d, learned_posemb, make_plan
from svlb.tensor import (
    Tensor, add, concat, embedding, gelu, layer_norm, matmul, mul, reshape, softmax, sum_, swapaxes, take,
    transpose,
)

Shapes = Dict[str, Tuple[int, ...]]


class HeadToken(str, Enum):
    CLS = "cls"
    MAP = "map"
    NONE = "none"


class Pooling(str, Enum):
    HEAD_TOKEN = "head_token"
    MEAN = "mean"


@dataclass
class PatchGrid:
    hp: int
    wp: int
    patch_size: int
    tokens: Tensor
    source_res: Tuple[int, int]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class TokenSequence:
    ids: np.ndarray
    answer_mask: np.ndarray = None
    pad_mask: np.ndarray = None

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.ids.shape[0]
        self.answer_mask = np.zeros(n, dtype=bool) if self.answer_mask is None else np.asarray(self.answer_mask, dtype=bool)
        self.pad_mask = np.zeros(n, dtype=bool) if self.pad_mask is None else np.asarray(self.pad_mask, dtype=bool)
        if self.answer_mask.shape != (n,) or self.pad_mask.shape != (n,):
            raise ContractError("ids, answer_mask and pad_mask must have equal length")
        if np.any(self.answer_mask & self.pad_mask):
            raise ContractError("answer tokens cannot be padding")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    depth: int = 4
    d_model: int = 128
    heads: int = 4
    head_dim: int = 32
    patch_size: int = 32
    image_size: int = 256
    mlp_ratio: int = 4
    position_mode: PositionMode = PositionMode()
    head_token: HeadToken = HeadToken.CLS
    pooling: Pooling = Pooling.HEAD_TOKEN
    mask_token: bool = False

    @model_validator(mode="after")
    def _check(self) -> "EncoderConfig":
        if self.d_model != self.heads * self.head_dim:
            raise ValueError(f"d_model ({self.d_model}) must equal heads*head_dim ({self.heads}*{self.head_dim})")
        if self.head_token == HeadToken.MAP and self.pooling != Pooling.HEAD_TOKEN:
            raise ValueError("a MAP head token implies head_token pooling")
        if self.head_token == HeadToken.NONE and self.pooling == Pooling.HEAD_TOKEN:
            raise ValueError("head_token pooling needs a CLS or MAP token")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        kind = self.position_mode.kind
        if kind == PositionKind.ROPE_2D and self.head_dim % 4:
            raise ValueError("2D-RoPE needs head_dim divisible by 4")
        if kind == PositionKind.ROPE_1D and self.head_dim % 2:
            raise ValueError("RoPE-1D needs an even head_dim")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def n_prefix(self) -> int:
        return 1 if self.head_token == HeadToken.CLS else 0

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid + (0 if self.head_token == HeadToken.NONE else 1)


class TextConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    vocab_size: int
    d_model: int = 128
    heads: int = 4
    depth: int = 2
    max_len: int = 32
    mlp_ratio: int = 4


class DecoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    vocab_size: int
    d_model: int = 128
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4
    theta_base: float = 10000.0
    patch_dim: int = 0
    bos: bool = True

    @model_validator(mode="after")
    def _check(self) -> "DecoderConfig":
        if self.d_model % self.heads or (self.d_model // self.heads) % 2:
            raise ValueError("decoder head_dim must be an even integer")
        return self


# patches

def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected an H x W x 3 image, got shape {image.shape}")
    h, w, _ = image.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    hp, wp = h // p, w // p
    tokens = image.reshape(hp, p, wp, p, 3).transpose(0, 2, 1, 3, 4).reshape(hp * wp, p * p * 3)
    dtype = tokens.dtype if np.issubdtype(tokens.dtype, np.floating) else None
    return PatchGrid(hp, wp, p, Tensor(tokens, dtype=dtype), (h, w))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p = grid.patch_size
    data = grid.tokens.data.reshape(grid.hp, grid.wp, p, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(data.reshape(grid.hp * p, grid.wp * p, 3))


# shapes and initialization

def _block_shapes(prefix: str, depth: int, d: int, ratio: int) -> Shapes:
    shapes: Shapes = {}
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        for ln in ("ln1", "ln2"):
            shapes[f"{b}.{ln}.gain"] = (d,)
            shapes[f"{b}.{ln}.bias"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{b}.attn.{proj}.weight"] = (d, d)
            shapes[f"{b}.attn.{proj}.bias"] = (d,)
        shapes[f"{b}.mlp.fc1.weight"] = (d, ratio * d)
        shapes[f"{b}.mlp.fc1.bias"] = (ratio * d,)
        shapes[f"{b}.mlp.fc2.weight"] = (ratio * d, d)
        shapes[f"{b}.mlp.fc2.bias"] = (d,)
    if depth:
        shapes[f"{prefix}.ln_f.gain"] = (d,)
        shapes[f"{prefix}.ln_f.bias"] = (d,)
    return shapes


def encoder_shapes(cfg: EncoderConfig, prefix: str = "enc") -> Shapes:
    d = cfg.d_model
    shapes: Shapes = {f"{prefix}.patch.weight": (cfg.patch_dim, d), f"{prefix}.patch.bias": (d,)}
    if cfg.head_token == HeadToken.CLS:
        shapes[f"{prefix}.cls"] = (1, 1, d)
    if cfg.position_mode.kind == PositionKind.LEARNED_ABS:
        shapes[f"{prefix}.pos.table"] = (cfg.grid * cfg.grid + cfg.n_prefix, d)
    if cfg.mask_token:
        shapes[f"{prefix}.mask_token"] = (d,)
    shapes.update(_block_shapes(prefix, cfg.depth, d, cfg.mlp_ratio))
    if cfg.head_token == HeadToken.MAP:
        m = f"{prefix}.map"
        shapes[f"{m}.query"] = (1, 1, d)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{m}.attn.{proj}.weight"] = (d, d)
            shapes[f"{m}.attn.{proj}.bias"] = (d,)
        shapes[f"{m}.ln.gain"] = (d,)
        shapes[f"{m}.ln.bias"] = (d,)
        shapes[f"{m}.mlp.fc1.weight"] = (d, cfg.mlp_ratio * d)
        shapes[f"{m}.mlp.fc1.bias"] = (cfg.mlp_ratio * d,)
        shapes[f"{m}.mlp.fc2.weight"] = (cfg.mlp_ratio * d, d)
        shapes[f"{m}.mlp.fc2.bias"] = (d,)
    return shapes


def text_shapes(cfg: TextConfig, prefix: str = "txt") -> Shapes:
    d = cfg.d_model
    shapes: Shapes = {f"{prefix}.embed": (cfg.vocab_size, d), f"{prefix}.pos.table": (cfg.max_len, d)}
    shapes.update(_block_shapes(prefix, cfg.depth, d, cfg.mlp_ratio))
    return shapes


def decoder_shapes(cfg: DecoderConfig, prefix: str = "dec") -> Shapes:
    d = cfg.d_model
    shapes: Shapes = {f"{prefix}.embed": (cfg.vocab_size, d),
                      f"{prefix}.head.weight": (d, cfg.vocab_size), f"{prefix}.head.bias": (cfg.vocab_size,)}
    if cfg.bos:
        shapes[f"{prefix}.bos"] = (1, 1, d)
    if cfg.patch_dim:
        shapes[f"{prefix}.pixel.weight"] = (d, cfg.patch_dim)
        shapes[f"{prefix}.pixel.bias"] = (cfg.patch_dim,)
    shapes.update(_block_shapes(prefix, cfg.depth, d, cfg.mlp_ratio))
    return shapes


def init_params(shapes: Shapes, rng: np.random.Generator, params: Optional[ParamSet] = None) -> ParamSet:
    """Deterministic init in sorted-name order: weights ~ N(0, 1/fan_in), tables ~ N(0, 0.02²).

    Vocabulary heads start near zero so the initial prediction is close to uniform.
    """
    params = params if params is not None else ParamSet()
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".head.weight"):
            arr = rng.standard_normal(shape) * 0.02
        elif name.endswith(".weight"):
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        else:
            arr = rng.standard_normal(shape) * 0.02
        params.add(name, Tensor(arr))
    return params


def check_shapes(params: ParamSet, shapes: Shapes) -> None:
    for name, shape in shapes.items():
        if name not in params:
            raise ConfigurationError(f"parameter {name!r} is missing")
        if params[name].shape != tuple(shape):
            raise ConfigurationError(f"parameter {name!r} has shape {params[name].shape}, expected {tuple(shape)}")


# building blocks

def linear(x: Tensor, params: ParamSet, name: str) -> Tensor:
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    if x.shape[-1] != w.shape[0]:
        raise ConfigurationError(f"{name}.weight expects input width {w.shape[0]}, got {x.shape[-1]}")
    return add(matmul(x, w), b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    return transpose(reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def qk_logits(xq: Tensor, xkv: Tensor, params: ParamSet, prefix: str, heads: int,
              rotate: Optional[Callable[[Tensor], Tensor]] = None) -> Tuple[Tensor, Tensor]:
    """Scaled attention logits [B, H, Lq, Lk] and the value heads."""
    q = _split_heads(linear(xq, params, f"{prefix}.q"), heads)
    k = _split_heads(linear(xkv, params, f"{prefix}.k"), heads)
    v = _split_heads(linear(xkv, params, f"{prefix}.v"), heads)
    if rotate is not None:
        q, k = rotate(q), rotate(k)
    scale = 1.0 / math.sqrt(q.shape[-1])
    return mul(matmul(q, swapaxes(k, -1, -2)), scale), v


def attention(xq: Tensor, xkv: Tensor, params: ParamSet, prefix: str, heads: int,
              mask: Optional[np.ndarray] = None, rotate: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    logits, v = qk_logits(xq, xkv, params, prefix, heads, rotate)
    out = matmul(softmax(logits, axis=-1, mask=mask), v)
    b, _, lq, _ = out.shape
    return linear(reshape(transpose(out, (0, 2, 1, 3)), (b, lq, xq.shape[-1])), params, f"{prefix}.out")


def mlp(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return linear(gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def _ln(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def transformer(x: Tensor, params: ParamSet, prefix: str, depth: int, heads: int,
                mask: Optional[np.ndarray] = None, rotate=None) -> Tensor:
    """Pre-norm blocks followed by a final norm (skipped when depth is 0)."""
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        h = _ln(x, params, f"{b}.ln1")
        x = add(x, attention(h, h, params, f"{b}.attn", heads, mask, rotate))
        x = add(x, mlp(_ln(x, params, f"{b}.ln2"), params, f"{b}.mlp"))
    if depth:
        x = _ln(x, params, f"{prefix}.ln_f")
    return x


def _broadcast_param(p: Tensor, batch: int) -> Tensor:
    return add(np.zeros((batch,) + p.shape[1:], dtype=p.dtype), p)


# image encoder

def encoder_rotation(cfg: EncoderConfig, length: int) -> Optional[Callable[[Tensor], Tensor]]:
    kind = cfg.position_mode.kind
    if kind == PositionKind.LEARNED_ABS:
        return None
    plan = make_plan(cfg.position_mode, cfg.head_dim)
    if kind == PositionKind.ROPE_1D:
        positions = np.arange(length)
        return lambda t: apply_rope1d(t, positions, plan)
    return lambda t: apply_rope2d(t, (cfg.grid, cfg.grid), plan, cfg.n_prefix)


def prefix_causal_mask(length: int, prefix: int) -> np.ndarray:
    """Tokens attend causally; the first `prefix` tokens are visible to everyone."""
    i = np.arange(length)
    return (i[None, :] <= i[:, None]) | (i[None, :] < prefix)


def encoder_inputs(tokens, cfg: EncoderConfig, params: ParamSet, prefix: str = "enc",
                   masked: Optional[np.ndarray] = None) -> Tensor:
    """Patch projection, optional mask-token substitution, head token and learned table."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.patch_dim:
        raise ConfigurationError(f"expected [B, L, {cfg.patch_dim}] patch tokens, got {tokens.shape}")
    batch = tokens.shape[0]
    x = linear(tokens, params, f"{prefix}.patch")
    if masked is not None:
        keep = (~np.asarray(masked, dtype=bool))[..., None].astype(x.dtype)
        x = add(mul(x, keep), mul(params[f"{prefix}.mask_token"], 1.0 - keep))
    if cfg.head_token == HeadToken.CLS:
        x = concat([_broadcast_param(params[f"{prefix}.cls"], batch), x], axis=1)
    if cfg.position_mode.kind == PositionKind.LEARNED_ABS:
        x = learned_posemb(x, params[f"{prefix}.pos.table"])
    return x


def encode_images(tokens, cfg: EncoderConfig, params: ParamSet, prefix: str = "enc",
                  prefix_len: Optional[int] = None, masked: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Batched image encoder: [B, hp*wp, patch_dim] -> (seq [B, L, d], pooled [B, d]).

    `prefix_len` switches self-attention to prefix-causal over the patch tokens;
    `masked` ([B, hp*wp] booleans) replaces those patch embeddings by the mask token.
    """
    check_shapes(params, encoder_shapes(cfg, prefix))
    x = encoder_inputs(tokens, cfg, params, prefix, masked)
    length = x.shape[1]
    mask = None if prefix_len is None else prefix_causal_mask(length, prefix_len + cfg.n_prefix)
    x = transformer(x, params, prefix, cfg.depth, cfg.heads, mask, encoder_rotation(cfg, length))

    if cfg.head_token == HeadToken.MAP:
        pooled = map_pool(x, params, f"{prefix}.map", cfg.heads)
        seq = concat([reshape(pooled, (x.shape[0], 1, cfg.d_model)), x], axis=1)
        return seq, pooled
    if cfg.pooling == Pooling.HEAD_TOKEN:
        return x, take(x, (slice(None), 0))
    patches = take(x, (slice(None), slice(cfg.n_prefix, None)))
    return x, mul(sum_(patches, axis=1), 1.0 / patches.shape[1])


def map_pool(x: Tensor, params: ParamSet, prefix: str, heads: int) -> Tensor:
    """Multihead attention pooling with a single learned query token."""
    batch = x.shape[0]
    query = _broadcast_param(params[f"{prefix}.query"], batch)
    h = attention(query, x, params, f"{prefix}.attn", heads)
    h = add(h, mlp(_ln(h, params, f"{prefix}.ln"), params, f"{prefix}.mlp"))
    return reshape(h, (batch, x.shape[-1]))


def encode_image(grid: PatchGrid, cfg: EncoderConfig, params: ParamSet, prefix: str = "enc") -> Tuple[Tensor, Tensor]:
    if (grid.hp, grid.wp) != (cfg.grid, cfg.grid) or grid.patch_size != cfg.patch_size:
        raise ConfigurationError(f"patch grid {grid.hp}x{grid.wp}/{grid.patch_size} does not match the encoder config")
    tokens = reshape(grid.tokens, (1,) + grid.tokens.shape)
    seq, pooled = encode_images(tokens, cfg, params, prefix)
    return reshape(seq, seq.shape[1:]), reshape(pooled, pooled.shape[1:])


# text encoder

def encode_texts(ids: np.ndarray, pad_mask: np.ndarray, cfg: TextConfig, params: ParamSet,
                 prefix: str = "txt") -> Tensor:
    """Bidirectional text tower; returns the mean over non-pad positions, [B, d]."""
    ids = np.asarray(ids, dtype=np.int64)
    keep = ~np.asarray(pad_mask, dtype=bool)
    if ids.ndim != 2 or ids.shape[1] == 0 or np.any(keep.sum(axis=1) == 0):
        raise ContractError("text encoder needs at least one non-pad token per sequence")
    x = learned_posemb(embedding(params[f"{prefix}.embed"], ids), params[f"{prefix}.pos.table"])
    x = transformer(x, params, prefix, cfg.depth, cfg.heads, mask=keep[:, None, None, :])
    w = (keep / keep.sum(axis=1, keepdims=True))[..., None].astype(x.dtype)
    return sum_(mul(x, w), axis=1)


def encode_text(seq: TokenSequence, cfg: TextConfig, params: ParamSet, prefix: str = "txt") -> Tensor:
    if len(seq) == 0:
        raise ContractError("cannot encode an empty sequence")
    pooled = encode_texts(seq.ids[None, :], seq.pad_mask[None, :], cfg, params, prefix)
    return reshape(pooled, (cfg.d_model,))


# causal decoder

def causal_trunk(x: Tensor, pad_mask: Optional[np.ndarray], cfg: DecoderConfig, params: ParamSet,
                 prefix: str) -> Tensor:
    """Causal pre-norm stack with RoPE-1D over the flat sequence index. x is [B, L, d]."""
    length = x.shape[1]
    mask = np.tril(np.ones((length, length), dtype=bool))[None, None]
    if pad_mask is not None:
        mask = mask & ~np.asarray(pad_mask, dtype=bool)[:, None, None, :]
        # pad queries still see position 0
        mask[..., 0] = True
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D, theta_base=cfg.theta_base), cfg.d_model // cfg.heads)
    positions = np.arange(length)
    return transformer(x, params, prefix, cfg.depth, cfg.heads, mask, lambda t: apply_rope1d(t, positions, plan))


def decode_batch(visual: Tensor, ids: np.ndarray, pad_mask: Optional[np.ndarray], cfg: DecoderConfig,
                 params: ParamSet, prefix: str = "dec") -> Tuple[Tensor, Optional[Tensor]]:
    """[bos ‖ visual ‖ text] -> (text_logits [B, Lt, V], patch_preds [B, Lv, patch_dim] or None)."""
    if not cfg.bos:
        raise ConfigurationError("decode_batch needs a decoder with a bos token")
    if visual.ndim != 3 or visual.shape[-1] != cfg.d_model:
        raise DimensionError("decode_multimodal", visual.shape, (cfg.d_model,))
    ids = np.asarray(ids, dtype=np.int64)
    batch, lv = visual.shape[0], visual.shape[1]
    lt = ids.shape[1]
    if ids.shape[0] != batch:
        raise DimensionError("decode_multimodal", visual.shape, ids.shape)
    parts = [_broadcast_param(params[f"{prefix}.bos"], batch), visual]
    if lt:
        parts.append(embedding(params[f"{prefix}.embed"], ids))
    x = concat(parts, axis=1)
    full_pad = None
    if pad_mask is not None:
        full_pad = np.concatenate([np.zeros((batch, 1 + lv), dtype=bool), np.asarray(pad_mask, dtype=bool)], axis=1)
    h = causal_trunk(x, full_pad, cfg, params, prefix)
    text_logits = linear(take(h, (slice(None), slice(lv, lv + lt))), params, f"{prefix}.head")
    patch_preds = None
    if cfg.patch_dim:
        patch_preds = linear(take(h, (slice(None), slice(0, lv))), params, f"{prefix}.pixel")
    return text_logits, patch_preds


def decode_multimodal(visual: Tensor, text: TokenSequence, cfg: DecoderConfig, params: ParamSet,
                      prefix: str = "dec") -> Tuple[Tensor, Optional[Tensor]]:
    if visual.ndim != 2:
        raise DimensionError("decode_multimodal", visual.shape, (cfg.d_model,))
    logits, preds = decode_batch(reshape(visual, (1,) + visual.shape), text.ids[None, :], text.pad_mask[None, :],
                                 cfg, params, prefix)
    return reshape(logits, logits.shape[1:]), None if preds is None else reshape(preds, preds.shape[1:])
