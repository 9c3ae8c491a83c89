"""Positional encodings: learned absolute tables, RoPE over a flat index, and 2D-RoPE.

Rotary pairs are interleaved: coordinates (2k, 2k+1) form pair k. Under 2D-RoPE
the first half of the head dimension holds Dh/4 pairs rotated by the row index
and the second half Dh/4 pairs rotated by the column index, which is the
block-diagonal composition R(Θ_h(h)) ⊕ R(Θ_w(w)).
"""
from __future__ import annotations
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from svlb.errors import CapacityError, ConfigurationError, DimensionError
from svlb.tensor import Tensor, add, custom_op


class PositionKind(str, Enum):
    LEARNED_ABS = "learned"
    ROPE_1D = "rope1d"
    ROPE_2D = "rope2d"


class PositionMode(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    kind: PositionKind = PositionKind.ROPE_2D
    theta_base: float = 10000.0
    # column schedule under ROPE_2D; None shares the row schedule
    theta_base_w: Optional[float] = None

    @field_validator("theta_base", "theta_base_w")
    @classmethod
    def _base_above_one(cls, v):
        if v is not None and not v > 1.0:
            raise ValueError("theta_base must be > 1")
        return v


@dataclass(frozen=True)
class RotationPlan:
    kind: PositionKind
    head_dim: int
    freqs: Optional[np.ndarray] = None
    freqs_h: Optional[np.ndarray] = None
    freqs_w: Optional[np.ndarray] = None


def _schedule(base: float, n_pairs: int, d_sub: int) -> np.ndarray:
    k = np.arange(n_pairs, dtype=np.float64)
    return base ** (-2.0 * k / d_sub)


def make_plan(mode: PositionMode, head_dim: int) -> RotationPlan:
    if mode.kind == PositionKind.ROPE_1D:
        if head_dim <= 0 or head_dim % 2:
            raise ConfigurationError(f"RoPE-1D needs an even head_dim, got {head_dim}")
        return RotationPlan(mode.kind, head_dim, freqs=_schedule(mode.theta_base, head_dim // 2, head_dim))
    if mode.kind == PositionKind.ROPE_2D:
        if head_dim <= 0 or head_dim % 4:
            raise ConfigurationError(f"2D-RoPE needs head_dim divisible by 4, got {head_dim}")
        half = head_dim // 2
        fh = _schedule(mode.theta_base, head_dim // 4, half)
        fw = _schedule(mode.theta_base_w or mode.theta_base, head_dim // 4, half)
        return RotationPlan(mode.kind, head_dim, freqs_h=fh, freqs_w=fw)
    return RotationPlan(mode.kind, head_dim)


def rotate_pairs(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate pair k of token i by angles[i, k]. x is [..., L, Dh], angles [L, Dh/2]."""
    *lead, length, dh = x.shape
    if angles.shape != (length, dh // 2):
        raise DimensionError("rotate_pairs", x.shape, angles.shape)
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    pairs = x.data.reshape(*lead, length, dh // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1).reshape(x.shape)

    def _back(g):
        gp = g.reshape(*lead, length, dh // 2, 2)
        g0, g1 = gp[..., 0], gp[..., 1]
        return (np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1).reshape(x.shape),)
    return custom_op(out, (x,), _back, "rope")


def rope1d_angles(positions: Sequence[int], plan: RotationPlan) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    if np.any(pos < 0):
        raise ConfigurationError("positions must be non-negative")
    return pos[:, None] * plan.freqs[None, :]


def apply_rope1d(x: Tensor, positions: Sequence[int], plan: RotationPlan) -> Tensor:
    if plan.kind != PositionKind.ROPE_1D or x.shape[-1] % 2:
        raise ConfigurationError(f"RoPE-1D plan cannot rotate head_dim {x.shape[-1]}")
    if x.shape[-1] != plan.head_dim:
        raise DimensionError("apply_rope1d", x.shape, (plan.head_dim,))
    if len(positions) != x.shape[-2]:
        raise DimensionError("apply_rope1d", x.shape, (len(positions),))
    return rotate_pairs(x, rope1d_angles(positions, plan))


def grid_positions(hp: int, wp: int, n_prefix: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """(h, w) per token. Prefix tokens sit at (0, 0); the grid then starts at (1, 1)."""
    idx = np.arange(hp * wp)
    h, w = idx // wp, idx % wp
    if n_prefix:
        h = np.concatenate([np.zeros(n_prefix, dtype=np.int64), h + 1])
        w = np.concatenate([np.zeros(n_prefix, dtype=np.int64), w + 1])
    return h, w


def rope2d_angles(h: np.ndarray, w: np.ndarray, plan: RotationPlan) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return np.concatenate([h[:, None] * plan.freqs_h[None, :], w[:, None] * plan.freqs_w[None, :]], axis=1)


def apply_rope2d(x: Tensor, grid: Tuple[int, int], plan: RotationPlan, n_prefix: int = 0) -> Tensor:
    if plan.kind != PositionKind.ROPE_2D or x.shape[-1] % 4:
        raise ConfigurationError(f"2D-RoPE plan cannot rotate head_dim {x.shape[-1]}")
    if x.shape[-1] != plan.head_dim:
        raise DimensionError("apply_rope2d", x.shape, (plan.head_dim,))
    hp, wp = grid
    if x.shape[-2] != n_prefix + hp * wp:
        raise DimensionError("apply_rope2d", x.shape, (n_prefix + hp * wp, plan.head_dim))
    h, w = grid_positions(hp, wp, n_prefix)
    return rotate_pairs(x, rope2d_angles(h, w, plan))


def learned_posemb(tokens: Tensor, table: Tensor) -> Tensor:
    length = tokens.shape[-2]
    if length > table.shape[0]:
        raise CapacityError(f"sequence length {length} exceeds position table capacity {table.shape[0]}")
    if tokens.shape[-1] != table.shape[-1]:
        raise DimensionError("learned_posemb", tokens.shape, table.shape)
    return add(tokens, table[:length])
