"""Grid report: one row per (objective, position mode), best value per column marked."""
from __future__ import annotations
import csv
import glob
import io
import logging
import os
from typing import Dict, List, Sequence, Set, Tuple

from svlb.config import Objective, load_config
from svlb.errors import EmptyResultError
from svlb.evaluate import METRIC_COLUMNS, ReportRow
from svlb.posenc import PositionKind
from svlb.runs import EVAL_FILE
from svlb.storage import read_json

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("variant", "position_mode", "objective") + METRIC_COLUMNS
HEADERS = {
    "variant": "Model", "position_mode": "Position", "objective": "Objective", "relation_lr": "Left/Right",
    "relation_ab": "Above/Below", "count": "Count", "existence": "Existence", "overall": "Overall",
}
_OBJECTIVE_ORDER = {o.value: i for i, o in enumerate(Objective)}
_POSITION_ORDER = {p.value: i for i, p in enumerate(PositionKind)}


def sort_rows(rows: Sequence[ReportRow]) -> List[ReportRow]:
    return sorted(rows, key=lambda r: (_OBJECTIVE_ORDER.get(r.objective, 99), _POSITION_ORDER.get(r.position_mode, 99),
                                       r.variant))


def collect_rows(config_glob: str) -> List[ReportRow]:
    paths = sorted(glob.glob(config_glob))
    rows: Dict[Tuple[str, str], ReportRow] = {}
    for path in paths:
        cfg = load_config(path)
        result = os.path.join(cfg.run_dir(), EVAL_FILE)
        if not os.path.exists(result):
            logger.warning("%s: no evaluation at %s, skipping", path, result)
            continue
        row = ReportRow.model_validate(read_json(result))
        key = (row.objective, row.position_mode)
        if key in rows:
            logger.warning("%s: duplicate cell %s/%s, keeping the first", path, *key)
            continue
        rows[key] = row
    if not rows:
        raise EmptyResultError(f"no evaluated runs match {config_glob!r}")
    return sort_rows(rows.values())


def fmt(value: float) -> str:
    return f"{value:.4f}"


def best_cells(rows: Sequence[ReportRow]) -> Dict[str, Set[int]]:
    """Row indices holding each metric column's maximum (ties all marked)."""
    out: Dict[str, Set[int]] = {}
    for col in METRIC_COLUMNS:
        values = [fmt(getattr(r, col)) for r in rows]
        top = max(values, key=float)
        out[col] = {i for i, v in enumerate(values) if v == top}
    return out


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.variant, r.position_mode, r.objective] + [fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def report_table(rows: Sequence[ReportRow]) -> str:
    """Plain-text table; the best value in each metric column is wrapped in **."""
    best = best_cells(rows)
    cells = [[HEADERS[c] for c in CSV_COLUMNS]]
    for i, r in enumerate(rows):
        line = [r.variant, r.position_mode, r.objective]
        for col in METRIC_COLUMNS:
            v = fmt(getattr(r, col))
            line.append(f"**{v}**" if i in best[col] else v)
        cells.append(line)
    widths = [max(len(row[j]) for row in cells) for j in range(len(CSV_COLUMNS))]
    text = []
    for k, row in enumerate(cells):
        text.append(" | ".join(c.ljust(w) if j < 3 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths))).rstrip())
        if k == 0:
            text.append("-+-".join("-" * w for w in widths))
    return "\n".join(text) + "\n"
