from __future__ import annotations
import fnmatch
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from svlb.errors import ConfigurationError, ContractError
from svlb.tensor import Tensor


class ParamSet:
    """Named parameters with a per-entry trainable flag. Iteration is lexicographic."""

    def __init__(self, entries: Optional[Dict[str, Tensor]] = None) -> None:
        self._entries: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = trainable
        self._entries[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> List[str]:
        return sorted(self._entries)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(n, self._entries[n]) for n in self.names()]

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> List[str]:
        return [n for n in self.names() if self._trainable[n]]

    def set_trainable(self, patterns: Iterable[str]) -> List[str]:
        """Train exactly the entries matching any glob pattern; freeze the rest."""
        patterns = list(patterns)
        for name, t in self._entries.items():
            flag = any(fnmatch.fnmatchcase(name, p) for p in patterns)
            self._trainable[name] = flag
            t.requires_grad = flag
        return self.trainable_names()

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def subset(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        for name in self.names():
            if name.startswith(prefix):
                out._entries[name] = self._entries[name]
                out._trainable[name] = self._trainable[name]
        return out

    def merge(self, other: "ParamSet") -> "ParamSet":
        for name, t in other.items():
            self.add(name, t, other.trainable(name))
        return self

    def copy(self) -> "ParamSet":
        return ParamSet.from_arrays(self.snapshot(), trainable={n: self._trainable[n] for n in self._entries})

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: self._entries[n].data.copy() for n in self.names()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            t = self[name]
            if t.shape != arr.shape:
                raise ConfigurationError(f"parameter {name!r}: shape {arr.shape} does not match {t.shape}")
            t.data = np.ascontiguousarray(arr.astype(t.dtype))

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], trainable: Optional[Dict[str, bool]] = None) -> "ParamSet":
        out = cls()
        for name in sorted(arrays):
            arr = arrays[name]
            out.add(name, Tensor(arr, dtype=arr.dtype), (trainable or {}).get(name, True))
        return out


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_adamw(params: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> OptimizerState:
    names = params.trainable_names()
    return OptimizerState(
        step=0,
        m={n: np.zeros_like(params[n].data) for n in names},
        v={n: np.zeros_like(params[n].data) for n in names},
        beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
    )


def adamw_step(params: ParamSet, state: OptimizerState, lr: float) -> OptimizerState:
    names = params.trainable_names()
    if sorted(state.m) != names:
        raise ContractError("optimizer moments do not match the trainable parameter set")
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise ContractError(f"missing gradient for trainable parameter(s): {', '.join(missing)}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in names:
        p = params[name]
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        data = p.data * (1.0 - lr * state.weight_decay) - lr * update
        p.data = np.ascontiguousarray(data.astype(p.dtype, copy=False))
    return state


def warmup_steps_for(total_steps: int, fraction: float = 0.03) -> int:
    return int(math.floor(total_steps * fraction))


def cosine_lr(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    if total_steps <= 0 or warmup_steps < 0 or warmup_steps >= total_steps:
        raise ConfigurationError(f"cosine_lr needs 0 <= warmup ({warmup_steps}) < total ({total_steps})")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
