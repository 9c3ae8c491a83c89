from __future__ import annotations
import hashlib
import json
import os
from typing import Any, Dict, Tuple

BASE = os.getenv("SVLB_RUNS_DIR", "runs")


def ensure_dir(path: str) -> None:
    if path:
        os.makedirs(path, exist_ok=True)


def sha256_bytes(data: bytes) -> str:
    h = hashlib.sha256()
    h.update(data)
    return h.hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_file(path: str, data: bytes) -> Tuple[int, str]:
    ensure_dir(os.path.dirname(path))
    with open(path, "wb") as f:
        f.write(data)
    return os.path.getsize(path), sha256_bytes(data)


def write_text(path: str, text: str) -> Tuple[int, str]:
    return write_file(path, text.encode("utf-8"))


def write_json(path: str, obj: Dict[str, Any]) -> Tuple[int, str]:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
