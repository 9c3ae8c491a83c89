from __future__ import annotations
import json
import os
from typing import Optional

from pydantic import ValidationError

from svlb.dataset import DatasetRecord

KEY_ORDER = ["scene", "category", "question", "answer", "image_path"]


def validate_jsonl(path: str, expected: Optional[int] = None) -> tuple[bool, str]:
    if not os.path.exists(path):
        return (False, "missing_jsonl")
    n = 0
    root = os.path.dirname(path)
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            try:
                body = json.loads(line)
            except json.JSONDecodeError:
                return (False, f"bad_json_line_{n}")
            if list(body) != KEY_ORDER:
                return (False, f"bad_keys_line_{n}")
            try:
                rec = DatasetRecord.model_validate(body)
            except ValidationError:
                return (False, f"bad_record_line_{n}")
            if not os.path.exists(os.path.join(root, rec.image_path)):
                return (False, f"missing_image_line_{n}")
            n += 1
    if expected is not None and n != expected:
        return (False, f"expected_{expected}_lines_got_{n}")
    return (True, "ok")
