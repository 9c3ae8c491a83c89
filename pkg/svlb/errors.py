from __future__ import annotations
from typing import Dict, Optional

import numpy as np


class SvlbError(Exception):
    exit_code: int = 1


class ConfigurationError(SvlbError):
    pass


class DimensionError(SvlbError):
    def __init__(self, op: str, *shapes) -> None:
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes))


class ContractError(SvlbError):
    pass


class NumericInputError(SvlbError):
    pass


class CapacityError(SvlbError):
    pass


class NormalizationError(SvlbError):
    pass


class CompatibilityError(SvlbError):
    pass


class VocabularyError(CompatibilityError):
    pass


class TargetIndexError(SvlbError, IndexError):
    pass


class MissingArtifactError(SvlbError):
    exit_code = 2


class EmptyResultError(SvlbError):
    exit_code = 3


class NonFiniteLossError(SvlbError):
    """Raised mid-training; `snapshot` holds the last finite parameter values."""

    def __init__(self, step: int, loss: float, snapshot: Optional[Dict[str, np.ndarray]] = None) -> None:
        self.step = step
        self.loss = loss
        self.snapshot = snapshot or {}
        super().__init__(f"non-finite loss {loss!r} at step {step}")
