"""
Tests for report tables, curves and overlays
"""

import json

import numpy as np
import pandas as pd
import pytest

from organoid_config import PipelineConfig
from organoid_errors import IncompleteRuns
from organoid_report import PRED_COLOR, TRUE_COLOR, build_report, collect_records, overlay_panel, report_row
from organoid_scenarios import ScenarioGrid, plan_scenario
from organoid_splits import ScenarioConfig
from organoid_train import write_run_record
from test_scenarios import fake_record

GRID = {"folds": 2, "pretext_fractions": [1.0], "s3_budgets": [200, 300]}


@pytest.fixture
def pipeline(tmp_path):
    return PipelineConfig(workspace=str(tmp_path), scenario={"grid": GRID})


def _write_case(pipeline, case, skip=()):
    cells = plan_scenario(ScenarioConfig.for_case(case), ScenarioGrid(**GRID))
    for index, cell in enumerate(cells):
        for fold in range(GRID["folds"]):
            if (cell.cell_id, fold) in skip:
                continue
            f1 = 0.6 + 0.01 * index + 0.02 * fold
            write_run_record(fake_record(cell, fold, f1), pipeline.runs_dir / cell.cell_id / f"fold_{fold}")
    return cells


def test_report_row_aggregates_folds():
    cell = plan_scenario(ScenarioConfig.for_case(3), ScenarioGrid(**GRID))[0]
    row = report_row(cell, [fake_record(cell, 0, 0.84), fake_record(cell, 1, 0.86)], 2)
    assert row.scores["f1"]["best"] == pytest.approx(0.86)
    assert row.scores["f1"]["mean"] == pytest.approx(0.85)
    assert row.folds_complete == row.folds_expected == 2
    flat = row.flat()
    assert flat["best_f1"] == pytest.approx(0.86)
    assert "std_jaccard" in flat


def test_case3_report(pipeline):
    cells = _write_case(pipeline, 3)
    build_report(pipeline, cases=(3,))
    out = pipeline.report_dir
    table = pd.read_csv(out / "tables" / "case3.csv")
    assert len(table) == len(cells) == 4
    assert list(table.columns[:8]) == [
        "config_id", "loss", "augmentation", "pretext_fraction", "budget", "best_f1", "mean_f1", "std_f1",
    ]
    payload = json.loads((out / "tables" / "case3.json").read_text(encoding="utf-8"))
    assert payload["metadata"]["std"].startswith("sample")
    assert payload["metadata"]["missing"] == []

    curve = json.loads((out / "curves" / "case3_f1_vs_label_budget.json").read_text(encoding="utf-8"))
    assert curve["x"] == "label budget"
    supervised = [name for name in curve["series"] if name.startswith("supervised")]
    assert len(supervised) == 1
    assert [point[0] for point in curve["series"][supervised[0]]["0"]] == [200, 300]
    assert (out / "curves" / "case3_f1_vs_label_budget.png").stat().st_size > 0


def test_tables_are_byte_identical_across_rebuilds(pipeline):
    _write_case(pipeline, 3)
    build_report(pipeline, cases=(3,))
    first = (pipeline.report_dir / "tables" / "case3.csv").read_bytes()
    build_report(pipeline, cases=(3,))
    assert (pipeline.report_dir / "tables" / "case3.csv").read_bytes() == first


def test_missing_folds_are_flagged(pipeline):
    cells = plan_scenario(ScenarioConfig.for_case(3), ScenarioGrid(**GRID))
    _write_case(pipeline, 3, skip={(cells[0].cell_id, 1)})
    with pytest.raises(IncompleteRuns) as info:
        build_report(pipeline, cases=(3,))
    assert info.value.missing == [f"{cells[0].cell_id}/fold_1"]
    table = pd.read_csv(pipeline.report_dir / "tables" / "case3.csv")
    row = table[table.config_id == cells[0].cell_id].iloc[0]
    assert row.folds_complete == 1 and row.folds_expected == 2


def test_cases_without_runs_are_skipped(pipeline):
    _write_case(pipeline, 3)
    build_report(pipeline, cases=(1, 3))
    assert not (pipeline.report_dir / "tables" / "case1.csv").exists()


def test_collect_records_reports_absent_folds(pipeline):
    cells = _write_case(pipeline, 3)[:1]
    found, missing = collect_records(pipeline.runs_dir, cells, 3)
    assert len(found[cells[0].cell_id]) == 2
    assert missing == [f"{cells[0].cell_id}/fold_2"]


def test_overlay_panel_layout():
    image = np.full((4, 4), 0.5, dtype=np.float32)
    truth = np.zeros((4, 4), dtype=np.uint8)
    truth[0, 0] = 1
    predicted = np.zeros((4, 4), dtype=np.uint8)
    predicted[3, 3] = 1
    panel = overlay_panel(image, truth, predicted)
    assert panel.shape == (4, 4 * 4 + 3 * 4, 3)
    assert panel.dtype == np.uint8
    overlay = panel[:, 24:]
    gray = int(0.5 * 255)
    assert tuple(overlay[0, 0]) == tuple(int(0.5 * gray + 0.5 * c) for c in TRUE_COLOR)
    assert tuple(overlay[3, 3]) == tuple(int(0.5 * gray + 0.5 * c) for c in PRED_COLOR)
    assert tuple(overlay[1, 1]) == (gray, gray, gray)
    assert tuple(panel[0, 8]) == (255, 255, 255)
