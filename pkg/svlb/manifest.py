from __future__ import annotations
import hashlib
import os
from typing import Any, Dict, List, Optional

from pydantic import BaseModel

from svlb.storage import read_json, sha256_file, write_json


class ArtifactMeta(BaseModel):
    kind: str
    path: str
    bytes: int
    sha256: str
    primary: bool = False


class RunManifest(BaseModel):
    """Per-command record of outputs. No timestamps: reruns must hash identically."""
    id: str
    command: str
    seed: int
    config: Dict[str, Any]
    counts: Dict[str, int] = {}
    artifacts: List[ArtifactMeta] = []
    content_hash: str = ""
    status: str = "ok"
    error: Optional[Dict[str, Any]] = None


def artifact(root: str, path: str, kind: str, primary: bool = False) -> ArtifactMeta:
    """Describe a file already on disk; `path` is stored relative to `root`."""
    rel = os.path.relpath(path, root).replace(os.sep, "/")
    return ArtifactMeta(kind=kind, path=rel, bytes=os.path.getsize(path), sha256=sha256_file(path), primary=primary)


def content_hash(artifacts: List[ArtifactMeta]) -> str:
    h = hashlib.sha256()
    for a in sorted(artifacts, key=lambda a: a.path):
        h.update(f"{a.path}\0{a.sha256}\n".encode("utf-8"))
    return h.hexdigest()


def write_manifest(path: str, manifest: RunManifest) -> RunManifest:
    manifest.content_hash = content_hash(manifest.artifacts)
    write_json(path, manifest.model_dump(mode="json"))
    return manifest


def read_manifest(path: str) -> RunManifest:
    return RunManifest.model_validate(read_json(path))
