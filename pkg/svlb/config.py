"""Run configuration: a flat YAML document of dotted keys validated by RunConfig.

    experiment: clip-rope2d
    seed: 0
    encoder.objective: clip
    encoder.position_mode: rope2d
    stage1.steps: 50

Every combination that cannot run is rejected here, before any compute.
"""
from __future__ import annotations
import hashlib
import json
import os
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from svlb.align import Stage, TrainStageConfig, VlmConfig
from svlb.encoders import DecoderConfig, EncoderConfig, HeadToken, Pooling, TextConfig
from svlb.errors import ConfigurationError
from svlb.posenc import PositionKind, PositionMode
from svlb.scene import SceneConfig
from svlb.vocab import MAX_COUNT, Vocabulary


class Objective(str, Enum):
    CLIP = "clip"
    SIGLIP = "siglip"
    SIGLIP2 = "siglip2"
    AIMV2 = "aimv2"


OBJECTIVE_LABELS = {Objective.CLIP: "CLIP", Objective.SIGLIP: "SigLIP", Objective.SIGLIP2: "SigLIP2",
                    Objective.AIMV2: "AIMv2"}
POSITION_SUFFIX = {PositionKind.LEARNED_ABS: "", PositionKind.ROPE_1D: "-RoPE-1D", PositionKind.ROPE_2D: "-2D-RoPE"}


def variant_name(objective: str, position_mode: str) -> str:
    """Table-row label, e.g. LLaVA-SigLIP-2D-RoPE; learned tables are the unsuffixed baseline."""
    return f"LLaVA-{OBJECTIVE_LABELS[Objective(objective)]}{POSITION_SUFFIX[PositionKind(position_mode)]}"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    out_dir: str = "data"
    n_train: int = 256
    n_eval: int = 128
    canvas: int = 256
    rows: int = 4
    cols: int = 4
    max_objects: int = 4
    min_objects: int = 2

    @field_validator("n_train", "n_eval")
    @classmethod
    def _non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("split sizes must be non-negative")
        return v


class EncoderSection(_Section):
    objective: Objective = Objective.CLIP
    position_mode: PositionKind = PositionKind.LEARNED_ABS
    depth: int = 4
    d_model: int = 128
    heads: int = 4
    patch_size: int = 32
    mlp_ratio: int = 4
    theta_base: float = 10000.0
    theta_base_w: Optional[float] = None
    # pretraining heads
    decoder_depth: int = 2
    prefix_len: Optional[int] = None
    pixel_weight: float = 1.0
    mask_ratio: float = 0.25
    ema_momentum: float = 0.99
    siglip2_weights: List[float] = [1.0, 0.5, 0.5, 0.5]
    siglip2_phase_in: bool = False

    @field_validator("siglip2_weights")
    @classmethod
    def _four_weights(cls, v: List[float]) -> List[float]:
        if len(v) != 4 or any(w < 0 for w in v):
            raise ValueError("siglip2_weights needs four non-negative numbers (sigmoid, distill, masked, ar)")
        return v


class TextSection(_Section):
    depth: int = 2
    max_len: int = 32


class LmSection(_Section):
    depth: int = 2
    d_model: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    theta_base: float = 10000.0


class TrainSection(_Section):
    steps: int = 200
    batch: int = 16
    lr: float = 1e-3
    warmup_fraction: float = 0.03
    weight_decay: float = 0.0
    micro_batch: Optional[int] = None
    log_every: int = 10

    @model_validator(mode="after")
    def _check(self) -> "TrainSection":
        if self.steps < 0 or self.batch < 1 or not self.lr > 0:
            raise ValueError("steps >= 0, batch >= 1 and lr > 0 are required")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.micro_batch is not None and (self.micro_batch < 1 or self.batch % self.micro_batch):
            raise ValueError(f"micro_batch {self.micro_batch} must divide batch {self.batch}")
        return self


class EvalSection(_Section):
    max_tokens: int = 4


class PathsSection(_Section):
    runs_dir: str = "runs"
    encoder_ckpt: Optional[str] = None


class RunConfig(_Section):
    experiment: str
    seed: int = 0
    precision: Literal["train", "verify"] = "train"
    data: DataSection = DataSection()
    encoder: EncoderSection = EncoderSection()
    text: TextSection = TextSection()
    lm: LmSection = LmSection()
    pretrain: TrainSection = TrainSection(steps=200, batch=32, lr=1e-3)
    stage1: TrainSection = TrainSection(steps=200, batch=16, lr=1e-3)
    stage2: TrainSection = TrainSection(steps=200, batch=16, lr=2e-5)
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _runnable(self) -> "RunConfig":
        try:
            self.scene_config()
            self.encoder_config()
            self.decoder_config(len(Vocabulary.default()))
            self.vlm_config(len(Vocabulary.default()))
        except ValidationError as exc:
            raise ValueError(str(exc)) from None
        if self.data.max_objects > MAX_COUNT:
            raise ValueError(f"data.max_objects above {MAX_COUNT} cannot be answered by the vocabulary")
        # captions spell cell indices as digit tokens
        if max(self.data.rows, self.data.cols) - 1 > MAX_COUNT:
            raise ValueError(f"data.rows/cols above {MAX_COUNT + 1} cannot be captioned with the vocabulary")
        if self.text.max_len < 6 * self.data.max_objects:
            raise ValueError(f"text.max_len {self.text.max_len} cannot hold a caption of "
                             f"{self.data.max_objects} objects (needs {6 * self.data.max_objects})")
        n_patches = self.encoder_config().grid ** 2
        if self.encoder.prefix_len is not None and not 0 <= self.encoder.prefix_len < n_patches:
            raise ValueError(f"encoder.prefix_len must lie in [0, {n_patches})")
        if not 0.0 < self.encoder.mask_ratio < 1.0:
            raise ValueError("encoder.mask_ratio must lie in (0, 1)")
        if not 0.0 <= self.encoder.ema_momentum <= 1.0:
            raise ValueError("encoder.ema_momentum must lie in [0, 1]")
        if self.encoder.objective == Objective.AIMV2 and self.encoder.decoder_depth < 1:
            raise ValueError("aimv2 needs a decoder (encoder.decoder_depth >= 1)")
        return self

    # derived configs

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(canvas=d.canvas, rows=d.rows, cols=d.cols, max_objects=d.max_objects,
                           min_objects=d.min_objects)

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        if e.d_model % e.heads:
            raise ValueError(f"encoder.d_model {e.d_model} is not divisible by encoder.heads {e.heads}")
        head_token, pooling = {
            Objective.CLIP: (HeadToken.CLS, Pooling.HEAD_TOKEN),
            Objective.SIGLIP: (HeadToken.MAP, Pooling.HEAD_TOKEN),
            Objective.SIGLIP2: (HeadToken.MAP, Pooling.HEAD_TOKEN),
            Objective.AIMV2: (HeadToken.NONE, Pooling.MEAN),
        }[e.objective]
        return EncoderConfig(
            depth=e.depth, d_model=e.d_model, heads=e.heads, head_dim=e.d_model // e.heads,
            patch_size=e.patch_size, image_size=self.data.canvas, mlp_ratio=e.mlp_ratio,
            position_mode=PositionMode(kind=e.position_mode, theta_base=e.theta_base, theta_base_w=e.theta_base_w),
            head_token=head_token, pooling=pooling, mask_token=e.objective == Objective.SIGLIP2,
        )

    def text_config(self, vocab_size: int) -> TextConfig:
        e = self.encoder
        return TextConfig(vocab_size=vocab_size, d_model=e.d_model, heads=e.heads, depth=self.text.depth,
                          max_len=self.text.max_len, mlp_ratio=e.mlp_ratio)

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        """Pretraining decoder: pixel head only for aimv2."""
        e = self.encoder
        patch_dim = e.patch_size * e.patch_size * 3 if e.objective == Objective.AIMV2 else 0
        return DecoderConfig(vocab_size=vocab_size, d_model=e.d_model, heads=e.heads, depth=e.decoder_depth,
                             mlp_ratio=e.mlp_ratio, patch_dim=patch_dim, bos=True)

    def vlm_config(self, vocab_size: int) -> VlmConfig:
        lm = DecoderConfig(vocab_size=vocab_size, d_model=self.lm.d_model, heads=self.lm.heads,
                           depth=self.lm.depth, mlp_ratio=self.lm.mlp_ratio, theta_base=self.lm.theta_base,
                           patch_dim=0, bos=False)
        return VlmConfig(encoder=self.encoder_config(), lm=lm, max_tokens=self.eval.max_tokens)

    def stage_config(self, stage: Stage) -> TrainStageConfig:
        section = self.stage1 if stage == Stage.PROJECTION_PRETRAIN else self.stage2
        return TrainStageConfig(
            stage=stage, lr_max=section.lr, global_batch=section.batch, steps=section.steps,
            trainable=["proj.*"] if stage == Stage.PROJECTION_PRETRAIN else ["*"],
            warmup_fraction=section.warmup_fraction, weight_decay=section.weight_decay,
            micro_batch=section.micro_batch, log_every=section.log_every,
        )

    @property
    def variant(self) -> str:
        return variant_name(self.encoder.objective.value, self.encoder.position_mode.value)

    def run_dir(self, out: Optional[str] = None) -> str:
        return out or os.path.join(self.paths.runs_dir, self.experiment)


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def architecture_hash(cfg: RunConfig, scope: str = "encoder") -> str:
    """sha256 over the sections that determine parameter shapes.

    scope "encoder" covers the pretraining checkpoint, "vlm" the aligned model.
    """
    body: Dict[str, Any] = {
        "canvas": cfg.data.canvas,
        "encoder": cfg.encoder.model_dump(mode="json", include={
            "objective", "position_mode", "depth", "d_model", "heads", "patch_size", "mlp_ratio", "decoder_depth"}),
        "vocab": Vocabulary.default().fingerprint(),
    }
    if scope == "encoder":
        body["text"] = cfg.text.model_dump(mode="json")
    elif scope == "vlm":
        body["lm"] = cfg.lm.model_dump(mode="json")
    else:
        raise ConfigurationError(f"unknown hash scope {scope!r}")
    return hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()


def unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key in sorted(flat):
        value = flat[key]
        if not isinstance(key, str) or not key:
            raise ConfigurationError(f"config keys must be non-empty strings, got {key!r}")
        if isinstance(value, dict):
            raise ConfigurationError(f"config is flat: use dotted keys instead of a nested mapping at {key!r}")
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"config key {key!r} conflicts with scalar {part!r}")
            node = child
        if parts[-1] in node:
            raise ConfigurationError(f"config key {key!r} conflicts with a section of the same name")
        node[parts[-1]] = value
    return nested


def parse_config(flat: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    flat = dict(flat)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(unflatten(flat))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration:\n{exc}") from None


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            flat = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    if not isinstance(flat, dict):
        raise ConfigurationError(f"{path}: expected a mapping of dotted keys")
    return parse_config(flat, overrides)
