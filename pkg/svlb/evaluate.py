"""Exact-match evaluation of an answering model over an eval split."""
from __future__ import annotations
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict

from svlb.dataset import DatasetRecord, load_images, load_split, worker_count
from svlb.qa import CATEGORIES

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("relation_lr", "relation_ab", "count", "existence", "overall")


class Answerer(Protocol):
    def answer(self, image: np.ndarray, question: str) -> str: ...


class ReportRow(BaseModel):
    model_config = ConfigDict(extra="forbid")
    variant: str
    position_mode: str
    objective: str
    relation_lr: float
    relation_ab: float
    count: float
    existence: float
    overall: float
    totals: Dict[str, int] = {}


def normalize_answer(text: str) -> str:
    return " ".join(str(text).lower().split())


def score(records: List[DatasetRecord], predictions: List[str], *, variant: str = "",
          position_mode: str = "", objective: str = "") -> ReportRow:
    """Accuracy per category and overall; a category with no items scores 0.0."""
    hits: Dict[str, int] = {c.value: 0 for c in CATEGORIES}
    totals: Dict[str, int] = {c.value: 0 for c in CATEGORIES}
    for rec, pred in zip(records, predictions, strict=True):
        key = rec.category.value
        totals[key] += 1
        hits[key] += normalize_answer(pred) == normalize_answer(rec.answer)
    acc = {k: (hits[k] / totals[k] if totals[k] else 0.0) for k in totals}
    n = sum(totals.values())
    overall = sum(hits.values()) / n if n else 0.0
    return ReportRow(variant=variant, position_mode=position_mode, objective=objective,
                     overall=overall, totals={**totals, "overall": n}, **acc)


def evaluate(model: Answerer, eval_file: str, *, variant: str = "", position_mode: str = "",
             objective: str = "", threads: Optional[int] = None) -> ReportRow:
    records = load_split(eval_file)
    images = load_images(records, os.path.dirname(os.path.abspath(eval_file)), threads)
    workers = threads or worker_count()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        predictions = list(pool.map(lambda job: model.answer(*job), zip(images, (r.question for r in records))))
    row = score(records, predictions, variant=variant, position_mode=position_mode, objective=objective)
    logger.info("evaluated %d items: overall %.4f", len(records), row.overall)
    return row
