import itertools
import os

import pytest
from openpyxl import load_workbook

from svlb.config import variant_name
from svlb.errors import EmptyResultError
from svlb.evaluate import ReportRow
from svlb.renderers.html_renderer import render_html
from svlb.renderers.xlsx_renderer import render_xlsx
from svlb.report import best_cells, collect_rows, report_csv, report_table, sort_rows
from svlb.storage import write_json

OBJECTIVES = ["clip", "siglip", "siglip2", "aimv2"]
POSITIONS = ["learned", "rope1d", "rope2d"]


def _row(objective, position, lr, ab=0.5, count=0.25, existence=0.75):
    overall = (lr + ab + count + existence) / 4
    return ReportRow(variant=variant_name(objective, position), position_mode=position, objective=objective,
                     relation_lr=lr, relation_ab=ab, count=count, existence=existence, overall=overall)


def test_ties_are_all_marked():
    rows = [_row("clip", "learned", 0.9), _row("clip", "rope2d", 0.9), _row("siglip", "rope2d", 0.1)]
    best = best_cells(rows)
    assert best["relation_lr"] == {0, 1}
    assert best["count"] == {0, 1, 2}
    table = report_table(rows)
    assert table.count("**0.9000**") == 2
    assert "**0.1000**" not in table


def test_ties_compare_printed_values():
    rows = [_row("clip", "learned", 0.50001), _row("clip", "rope2d", 0.50002)]
    assert best_cells(rows)["relation_lr"] == {0, 1}


def test_csv_layout():
    text = report_csv([_row("siglip", "rope2d", 0.625)])
    header, line = text.splitlines()
    assert header == "variant,position_mode,objective,relation_lr,relation_ab,count,existence,overall"
    assert line == "LLaVA-SigLIP-2D-RoPE,rope2d,siglip,0.6250,0.5000,0.2500,0.7500,0.5312"


def test_rows_sort_by_objective_then_position():
    rows = [_row(o, p, 0.5) for o, p in itertools.product(reversed(OBJECTIVES), reversed(POSITIONS))]
    ordered = sort_rows(rows)
    assert [(r.objective, r.position_mode) for r in ordered] == list(itertools.product(OBJECTIVES, POSITIONS))


def _grid(write_config, tmp_path, skip=()):
    for k, (o, p) in enumerate(itertools.product(OBJECTIVES, POSITIONS)):
        name = f"{o}-{p}"
        write_config(f"grid/{name}.yaml", experiment=name, encoder__objective=o, encoder__position_mode=p)
        if name in skip:
            continue
        run_dir = tmp_path / "runs" / name
        write_json(str(run_dir / "eval.json"), _row(o, p, k / 12).model_dump(mode="json"))
    return str(tmp_path / "grid" / "*.yaml")


def test_full_grid_is_collected(write_config, tmp_path):
    (tmp_path / "grid").mkdir()
    rows = collect_rows(_grid(write_config, tmp_path))
    assert len(rows) == 12
    assert report_table(rows) == report_table(collect_rows(str(tmp_path / "grid" / "*.yaml")))
    assert report_csv(rows) == report_csv(list(rows))
    best = best_cells(rows)
    assert best["relation_lr"] == {11}
    assert rows[11].variant == "LLaVA-AIMv2-2D-RoPE"


def test_unevaluated_runs_are_skipped(write_config, tmp_path):
    (tmp_path / "grid").mkdir()
    rows = collect_rows(_grid(write_config, tmp_path, skip={"clip-learned", "aimv2-rope1d"}))
    assert len(rows) == 10


def test_nothing_evaluated(write_config, tmp_path):
    (tmp_path / "grid").mkdir()
    with pytest.raises(EmptyResultError):
        collect_rows(_grid(write_config, tmp_path, skip={f"{o}-{p}" for o in OBJECTIVES for p in POSITIONS}))
    with pytest.raises(EmptyResultError):
        collect_rows(str(tmp_path / "nothing" / "*.yaml"))


def test_renderers_mark_best(tmp_path):
    rows = [_row("clip", "learned", 0.9), _row("siglip", "rope2d", 0.4)]
    html = render_html(rows, title="grid <1>")
    assert "<b>0.9000</b>" in html and "<b>0.4000</b>" not in html
    assert "grid &lt;1&gt;" in html
    path = str(tmp_path / "report.xlsx")
    render_xlsx(rows, path)
    assert os.path.getsize(path) > 0
    ws = load_workbook(path).active
    assert ws.cell(row=1, column=1).value == "Model"
    assert ws.cell(row=2, column=4).value == 0.9
    assert ws.cell(row=2, column=4).font.bold and not ws.cell(row=3, column=4).font.bold


def test_single_row_is_best_everywhere():
    table = report_table([_row("clip", "rope2d", 0.3)])
    body = table.splitlines()[2]
    assert body.count("**") == 2 * 5
