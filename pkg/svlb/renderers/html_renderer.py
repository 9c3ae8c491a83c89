from __future__ import annotations
from typing import Sequence

from jinja2 import Environment, select_autoescape

from svlb.evaluate import METRIC_COLUMNS, ReportRow
from svlb.report import CSV_COLUMNS, HEADERS, best_cells, fmt

_TEMPLATE = """<html><head><meta charset='utf-8'><title>{{ title }}</title></head><body>
<h1>{{ title }}</h1>
<p>Values in bold are the best variant per column.</p>
<table border="1" cellpadding="4">
<tr>{% for h in headers %}<th>{{ h }}</th>{% endfor %}</tr>
{% for row in rows %}<tr>{% for cell in row %}<td>{% if cell.best %}<b>{{ cell.text }}</b>{% else %}{{ cell.text }}{% endif %}</td>{% endfor %}</tr>
{% endfor %}</table>
</body></html>
"""

_env = Environment(autoescape=select_autoescape(default=True))


def render_html(rows: Sequence[ReportRow], title: str = "Spatial reasoning grid") -> str:
    best = best_cells(rows)
    table = []
    for i, r in enumerate(rows):
        cells = [{"text": v, "best": False} for v in (r.variant, r.position_mode, r.objective)]
        cells += [{"text": fmt(getattr(r, c)), "best": i in best[c]} for c in METRIC_COLUMNS]
        table.append(cells)
    return _env.from_string(_TEMPLATE).render(title=title, headers=[HEADERS[c] for c in CSV_COLUMNS], rows=table)
