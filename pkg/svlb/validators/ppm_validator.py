from __future__ import annotations
import os
import re

_HEADER = re.compile(rb"\AP6\n(\d+) (\d+)\n255\n")


def validate_ppm(path: str) -> tuple[bool, str]:
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return (False, "empty_ppm")
    with open(path, "rb") as f:
        data = f.read()
    m = _HEADER.match(data)
    if not m:
        return (False, "bad_header")
    w, h = int(m.group(1)), int(m.group(2))
    if len(data) - m.end() != w * h * 3:
        return (False, "bad_payload_size")
    return (True, "ok")
