from __future__ import annotations
import os

from svlb.checkpoint import decode
from svlb.errors import CompatibilityError


def validate_checkpoint(path: str) -> tuple[bool, str]:
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return (False, "empty_checkpoint")
    with open(path, "rb") as f:
        try:
            ckpt = decode(f.read())
        except CompatibilityError as exc:
            return (False, str(exc))
    if not ckpt.arrays:
        return (False, "no_parameters")
    return (True, "ok")
