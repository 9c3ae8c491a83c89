from __future__ import annotations
import glob
import logging
import os
from functools import lru_cache
from typing import Any, Dict, Optional

from fastapi import APIRouter, Depends, HTTPException
from fastapi.responses import HTMLResponse
from pydantic import BaseModel, ConfigDict

from svlb.align import VlmAnswerer
from svlb.config import RunConfig
from svlb.errors import CompatibilityError, ConfigurationError, MissingArtifactError, SvlbError
from svlb.evaluate import ReportRow
from svlb.renderers.html_renderer import render_html
from svlb.report import report_table
from svlb.runs import EVAL_FILE, load_answerer, manifest_path
from svlb.scene import SceneSpec, read_ppm, render
from svlb.storage import BASE, read_json
from svlb.validators.ppm_validator import validate_ppm

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/svlb", tags=["svlb"])


def get_runs_dir() -> str:
    return BASE


class GeneratePayload(BaseModel):
    model_config = ConfigDict(extra="forbid")
    question: str
    image_path: Optional[str] = None
    scene: Optional[SceneSpec] = None


def _run_dir(runs_dir: str, name: str) -> str:
    if not name or name != os.path.basename(name) or name.startswith("."):
        raise HTTPException(400, f"invalid run name {name!r}")
    path = os.path.join(runs_dir, name)
    if not os.path.isdir(path):
        raise HTTPException(404, "run not found")
    return path


def _status(exc: SvlbError) -> int:
    if isinstance(exc, MissingArtifactError):
        return 404
    if isinstance(exc, (ConfigurationError, CompatibilityError)):
        return 422
    return 400


def _run_config(run_dir: str) -> RunConfig:
    path = manifest_path(run_dir, "align")
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} not found")
    return RunConfig.model_validate(read_json(path)["config"])


def _within(path: str, root: str) -> bool:
    root = os.path.realpath(root)
    return os.path.commonpath([path, root]) == root


def _readable_image(image_path: str, runs_dir: str, run_dir: str) -> str:
    """Resolved image path, allowed only under the runs root or the run's data directory."""
    path = os.path.realpath(image_path)
    roots = [runs_dir, _run_config(run_dir).data.out_dir]
    if not any(_within(path, root) for root in roots):
        raise HTTPException(403, "image_path must lie under the runs or data directory")
    return path


@lru_cache(maxsize=8)
def _answerer(run_dir: str, stamp: float) -> VlmAnswerer:
    # stamp is the manifest mtime, so a re-aligned run is reloaded
    return load_answerer(_run_config(run_dir), run_dir)


@router.get("/health")
def health(runs_dir: str = Depends(get_runs_dir)):
    return {"status": "ok", "component": "svlb", "storage": runs_dir}


@router.get("/runs/{name}")
def get_run(name: str, runs_dir: str = Depends(get_runs_dir)) -> Dict[str, Any]:
    run_dir = _run_dir(runs_dir, name)
    manifests = {}
    for path in sorted(glob.glob(os.path.join(run_dir, "*.manifest.json"))):
        manifests[os.path.basename(path).removesuffix(".manifest.json")] = read_json(path)
    result = os.path.join(run_dir, EVAL_FILE)
    return {"name": name, "manifests": manifests, "eval": read_json(result) if os.path.exists(result) else None}


@router.get("/runs/{name}/report")
def get_report(name: str, format: str = "json", runs_dir: str = Depends(get_runs_dir)):
    result = os.path.join(_run_dir(runs_dir, name), EVAL_FILE)
    if not os.path.exists(result):
        raise HTTPException(404, "run has not been evaluated")
    row = ReportRow.model_validate(read_json(result))
    if format == "html":
        return HTMLResponse(render_html([row], title=name))
    if format != "json":
        raise HTTPException(400, f"unsupported report format {format!r}")
    return {"row": row.model_dump(mode="json"), "table": report_table([row])}


@router.post("/runs/{name}/generate")
def generate_endpoint(name: str, body: GeneratePayload, runs_dir: str = Depends(get_runs_dir)):
    run_dir = _run_dir(runs_dir, name)
    if (body.image_path is None) == (body.scene is None):
        raise HTTPException(400, "give exactly one of image_path or scene")
    try:
        if body.scene is not None:
            image = render(body.scene)
        else:
            path = _readable_image(body.image_path, runs_dir, run_dir)
            ok, reason = validate_ppm(path)
            if not ok:
                raise HTTPException(422, f"ppm validator: {reason}")
            image = read_ppm(path)
        align_manifest = manifest_path(run_dir, "align")
        stamp = os.path.getmtime(align_manifest) if os.path.exists(align_manifest) else 0.0
        answer = _answerer(run_dir, stamp).answer(image, body.question)
    except SvlbError as exc:
        logger.info("generate on %s failed: %s", name, exc)
        raise HTTPException(_status(exc), str(exc)) from None
    return {"run": name, "question": body.question, "answer": answer}
