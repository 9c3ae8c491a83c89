from __future__ import annotations
from typing import Sequence

from openpyxl import Workbook
from openpyxl.styles import Font

from svlb.evaluate import METRIC_COLUMNS, ReportRow
from svlb.report import CSV_COLUMNS, HEADERS, best_cells


def render_xlsx(rows: Sequence[ReportRow], out_path: str) -> None:
    wb = Workbook()
    ws = wb.active
    ws.title = "Spatial"
    ws.append([HEADERS[c] for c in CSV_COLUMNS])
    for cell in ws[1]:
        cell.font = Font(bold=True)
    best = best_cells(rows)
    for i, r in enumerate(rows):
        ws.append([r.variant, r.position_mode, r.objective] + [round(getattr(r, c), 4) for c in METRIC_COLUMNS])
        for j, col in enumerate(METRIC_COLUMNS):
            cell = ws.cell(row=i + 2, column=4 + j)
            cell.number_format = "0.0000"
            if i in best[col]:
                cell.font = Font(bold=True)
    wb.save(out_path)
