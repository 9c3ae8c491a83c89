"""Bit-exact binary checkpoints.

Layout, all integers little-endian:
    b"SVLB" | u32 version | u32 count | 32-byte sha256 config hash
    per parameter (sorted by name):
        u32 name length | name utf-8 | u8 dtype code | u8 ndim | u32 dims[ndim] | payload
"""
from __future__ import annotations
import io
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from svlb.errors import CompatibilityError, ConfigurationError, MissingArtifactError
from svlb.optim import ParamSet
from svlb.storage import read_json, write_file, write_json
from svlb.tensor import DTYPE_CODES

logger = logging.getLogger(__name__)

MAGIC = b"SVLB"
VERSION = 1
_CODE_DTYPES = {code: np.dtype(dt).newbyteorder("<") for dt, code in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    version: int
    config_hash: bytes
    arrays: Dict[str, np.ndarray]

    @property
    def config_hash_hex(self) -> str:
        return self.config_hash.hex()


def _hash_bytes(config_hash: Union[str, bytes]) -> bytes:
    if isinstance(config_hash, str):
        config_hash = bytes.fromhex(config_hash)
    if len(config_hash) != 32:
        raise ConfigurationError("config hash must be a 32-byte sha256 digest")
    return config_hash


def encode(arrays: Dict[str, np.ndarray], config_hash: Union[str, bytes]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    buf.write(_hash_bytes(config_hash))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ConfigurationError(f"parameter {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    view = memoryview(data)
    if len(view) < 44:
        raise CompatibilityError("checkpoint shorter than its header")
    if bytes(view[:4]) != MAGIC:
        raise CompatibilityError("not an SVLB checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {version}")
    config_hash = bytes(view[12:44])
    pos = 44
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            dtype = _CODE_DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(view):
                raise CompatibilityError(f"checkpoint truncated inside {name!r}")
            arr = np.frombuffer(view[pos:pos + size], dtype=dtype).reshape(dims)
            arrays[name] = arr.astype(dtype.newbyteorder("="))
            pos += size
    except (struct.error, KeyError) as exc:
        raise CompatibilityError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(view):
        raise CompatibilityError("trailing bytes after the last parameter record")
    return Checkpoint(version, config_hash, arrays)


def save_checkpoint(path: str, params: Union[ParamSet, Dict[str, np.ndarray]], config_hash: Union[str, bytes],
                    meta: Optional[dict] = None) -> str:
    """Write the checkpoint and, when `meta` is given, its `<name>.meta.json` sidecar. Returns the sha256."""
    arrays = params.snapshot() if isinstance(params, ParamSet) else params
    _, sha = write_file(path, encode(arrays, config_hash))
    if meta is not None:
        write_json(meta_path(path), meta)
    logger.debug("saved %d parameters to %s", len(arrays), path)
    return sha


def load_checkpoint(path: str, expected_hash: Union[str, bytes, None] = None, force: bool = False) -> Checkpoint:
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        ckpt = decode(f.read())
    if expected_hash is not None and ckpt.config_hash != _hash_bytes(expected_hash):
        if not force:
            raise CompatibilityError(
                f"{path}: config hash {ckpt.config_hash_hex[:12]} does not match the current configuration "
                f"({_hash_bytes(expected_hash).hex()[:12]}); pass --force to load anyway")
        logger.warning("loading %s despite a config hash mismatch (--force)", path)
    return ckpt


def meta_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".meta.json"


def load_meta(path: str) -> dict:
    p = meta_path(path)
    if not os.path.exists(p):
        raise MissingArtifactError(f"checkpoint metadata not found: {p}")
    return read_json(p)
