"""
Organoid Reports
Fold records folded into best/mean/std tables, F1 curves over label budgets and main-split
shares, and input / true / predicted / overlay panels
"""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from PIL import Image
from pydantic import Field

from organoid_config import PipelineConfig, atomic_write_text
from organoid_errors import IncompleteRuns, OrganoidError, ValidatedModel
from organoid_evaluate import METRIC_NAMES, aggregate, conventions
from organoid_scenarios import RunCell, ScenarioGrid, plan_scenario
from organoid_splits import ScenarioConfig
from organoid_train import RunRecord, read_run_record

logger = logging.getLogger(__name__)

TRUE_COLOR = (0, 200, 0)
PRED_COLOR = (220, 0, 220)
CSV_FLOAT = "%.6f"

Overlay = Tuple[str, np.ndarray, np.ndarray, np.ndarray]


class ReportRow(ValidatedModel):
    """One configuration: its axis values and best/mean/std of every metric over its folds"""
    config_id: str = Field(description="Cell id")
    case: int = Field(description="Experiment case")
    framework: str = Field(description="ssl or supervised")
    encoder: str = Field(description="Encoder family")
    freeze_encoder: bool = Field(description="Encoder excluded from training")
    loss: str = Field(description="Main-task loss")
    augmentation: Optional[str] = Field(default=None, description="Pretext corruption")
    pretext_loss: Optional[str] = Field(default=None, description="Pretext loss")
    pretext_fraction: Optional[float] = Field(default=None, description="Share of the pretext split")
    budget: Optional[int] = Field(default=None, description="Labelled crops the folds were cut from")
    supervised_fraction: Optional[float] = Field(default=None, description="Share of the main split")
    role: str = Field(default="grid", description="grid or reference")
    folds_complete: int = Field(description="Folds with a record")
    folds_expected: int = Field(description="Folds planned")
    scores: Dict[str, Dict[str, float]] = Field(default_factory=dict, description="metric -> best/mean/std")

    def flat(self) -> Dict[str, Any]:
        row = self.model_dump(exclude={"scores"})
        for metric in METRIC_NAMES:
            stat = self.scores.get(metric, {})
            for kind in ("best", "mean", "std"):
                row[f"{kind}_{metric}"] = stat.get(kind, float("nan"))
        return row


def report_row(cell: RunCell, records: Sequence[RunRecord], folds_expected: int) -> ReportRow:
    scored = [record.metrics for record in records if record.metrics is not None]
    scores = {name: stat.model_dump(include={"best", "mean", "std"}) for name, stat in aggregate(scored).items()} if scored else {}
    budget = cell.label_budget
    if records and "labels" in records[0].context:
        budget = int(records[0].context["labels"])
    return ReportRow(
        config_id=cell.cell_id,
        case=cell.case,
        framework=cell.framework,
        encoder=cell.encoder,
        freeze_encoder=cell.freeze_encoder,
        loss=cell.main_loss,
        augmentation=cell.augmentation,
        pretext_loss=cell.pretext_loss,
        pretext_fraction=cell.pretext_fraction,
        budget=budget,
        supervised_fraction=cell.supervised_fraction,
        role=cell.role,
        folds_complete=len(scored),
        folds_expected=folds_expected,
        scores=scores,
    )


def collect_records(runs_dir, cells: Sequence[RunCell], folds: int) -> Tuple[Dict[str, List[RunRecord]], List[str]]:
    """Completed fold records per cell id, plus '<cell>/fold_<k>' for every missing one"""
    found: Dict[str, List[RunRecord]] = {}
    missing = []
    for cell in cells:
        found[cell.cell_id] = []
        for fold in range(folds):
            try:
                record = read_run_record(Path(runs_dir) / cell.cell_id / f"fold_{fold}")
            except (OrganoidError, ValueError):
                record = None
            if record is None or record.status != "complete":
                missing.append(f"{cell.cell_id}/fold_{fold}")
            else:
                found[cell.cell_id].append(record)
    return found, missing


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

def _framework_label(cell: RunCell) -> str:
    if cell.framework == "ssl":
        return f"ssl {cell.augmentation} {cell.pretext_loss} pretext {cell.pretext_fraction:g}"
    return f"supervised {cell.encoder} {'frozen' if cell.freeze_encoder else 'trainable'} {cell.main_loss}"


def budget_curves(cells: Sequence[RunCell], records: Dict[str, List[RunRecord]], baseline: Optional[float]) -> Dict[str, Any]:
    """F1 against label budget, one line per (framework, fold)"""
    lines: Dict[str, Dict[str, List[List[float]]]] = defaultdict(lambda: defaultdict(list))
    for cell in cells:
        for record in records.get(cell.cell_id, []):
            if record.metrics is not None:
                lines[_framework_label(cell)][str(record.fold)].append([cell.label_budget, record.metrics.f1])
    series = {
        name: {fold: sorted(points) for fold, points in sorted(folds.items())}
        for name, folds in sorted(lines.items())
    }
    return {"x": "label budget", "y": "f1", "series": series, "baseline": baseline}


def fraction_curves(cells: Sequence[RunCell], records: Dict[str, List[RunRecord]]) -> Dict[str, Any]:
    """Mean and std F1 against main-split share; SSL reference cells become horizontal lines"""
    series: Dict[str, List[List[float]]] = defaultdict(list)
    references = {}
    for cell in cells:
        scored = [record.metrics for record in records.get(cell.cell_id, []) if record.metrics is not None]
        if not scored:
            continue
        f1 = aggregate(scored)["f1"]
        if cell.role == "reference":
            references[f"ssl {cell.label_budget}"] = f1.mean
        else:
            series[_framework_label(cell)].append([cell.supervised_fraction, f1.mean, f1.std])
    return {
        "x": "share of main split",
        "y": "f1",
        "series": {name: sorted(points) for name, points in sorted(series.items())},
        "references": dict(sorted(references.items())),
    }


def pretext_fraction_curves(cells: Sequence[RunCell], records: Dict[str, List[RunRecord]]) -> Dict[str, Any]:
    """Mean F1 against pretext share, per corruption / pretext loss / main loss"""
    series: Dict[str, List[List[float]]] = defaultdict(list)
    for cell in cells:
        scored = [record.metrics for record in records.get(cell.cell_id, []) if record.metrics is not None]
        if scored:
            name = f"{cell.augmentation} {cell.pretext_loss} {cell.main_loss}"
            series[name].append([cell.pretext_fraction, aggregate(scored)["f1"].mean])
    return {"x": "share of pretext split", "y": "f1", "series": {k: sorted(v) for k, v in sorted(series.items())}}


def _plot_curve(name: str, curve: Dict[str, Any], target: Path) -> None:
    figure = Figure(figsize=(7, 4.5))
    axes = figure.subplots()
    for label, data in curve["series"].items():
        if isinstance(data, dict):
            color = None
            for fold, points in data.items():
                xs, ys = zip(*points) if points else ((), ())
                (line,) = axes.plot(xs, ys, marker="o", linewidth=1, color=color, label=label if color is None else None)
                color = line.get_color()
        elif data and len(data[0]) == 3:
            xs, means, stds = zip(*data)
            axes.errorbar(xs, means, yerr=stds, marker="o", capsize=3, label=label)
        elif data:
            xs, ys = zip(*data)
            axes.plot(xs, ys, marker="o", label=label)
    if curve.get("baseline") is not None:
        axes.axhline(curve["baseline"], color="blue", linestyle=":", label="best SSL, minimal labels")
    for label, value in curve.get("references", {}).items():
        axes.axhline(value, linestyle=":", label=label)
    axes.set_xlabel(curve["x"])
    axes.set_ylabel(curve["y"])
    axes.set_ylim(0.0, 1.0)
    axes.set_title(name)
    axes.legend(fontsize=7)
    figure.tight_layout()
    figure.savefig(target, dpi=120)


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

def overlay_panel(image: np.ndarray, true_mask: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """input | true mask | predicted mask | overlay (true green, predicted magenta), RGB uint8"""
    gray = (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    truth = true_mask.astype(bool)
    predicted = pred_mask.astype(bool)

    def mask_panel(mask):
        return np.repeat((mask.astype(np.uint8) * 255)[..., None], 3, axis=2)

    blended = rgb.astype(np.float32)
    for mask, color in ((truth, TRUE_COLOR), (predicted, PRED_COLOR)):
        blended[mask] = 0.5 * blended[mask] + 0.5 * np.array(color, dtype=np.float32)
    separator = np.full((gray.shape[0], 4, 3), 255, dtype=np.uint8)
    panels = [rgb, mask_panel(truth), mask_panel(predicted), blended.astype(np.uint8)]
    joined = [panels[0]]
    for panel in panels[1:]:
        joined += [separator, panel]
    return np.concatenate(joined, axis=1)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _write_table(name: str, rows: Sequence[ReportRow], out_dir: Path, metadata: Dict[str, Any]) -> None:
    frame = pd.DataFrame([row.flat() for row in rows])
    leading = ["config_id", "loss", "augmentation", "pretext_fraction", "budget", "best_f1", "mean_f1", "std_f1"]
    if not frame.empty:
        frame = frame[leading + [column for column in frame.columns if column not in leading]]
    atomic_write_text(out_dir / "tables" / f"{name}.csv", frame.to_csv(index=False, float_format=CSV_FLOAT, lineterminator="\n"))
    payload = {"metadata": metadata, "rows": [row.model_dump(mode="json") for row in rows]}
    atomic_write_text(out_dir / "tables" / f"{name}.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def emit_report(
    rows: Dict[str, Sequence[ReportRow]],
    curves: Dict[str, Dict[str, Any]],
    overlays: Sequence[Overlay],
    out_dir,
    metadata: Optional[Dict[str, Any]] = None,
    missing: Sequence[str] = (),
) -> List[Path]:
    """Write tables, curves and overlays; raises IncompleteRuns after writing when folds are missing"""
    out_dir = Path(out_dir)
    metadata = dict(metadata or {}, missing=list(missing))
    for name, table_rows in sorted(rows.items()):
        _write_table(name, table_rows, out_dir, metadata)
    for name, curve in sorted(curves.items()):
        atomic_write_text(out_dir / "curves" / f"{name}.json", json.dumps(curve, indent=2, sort_keys=True) + "\n")
        _plot_curve(name, curve, out_dir / "curves" / f"{name}.png")
    (out_dir / "overlays").mkdir(parents=True, exist_ok=True)
    for crop_id, image, true_mask, pred_mask in overlays:
        Image.fromarray(overlay_panel(image, true_mask, pred_mask)).save(out_dir / "overlays" / f"{crop_id}.png")
    written = sorted(p for p in out_dir.rglob("*") if p.is_file())
    logger.info("Report in %s: %d tables, %d curves, %d overlays", out_dir, len(rows), len(curves), len(overlays))
    if missing:
        raise IncompleteRuns(list(missing))
    return written


def _best_ssl_minimal(rows: Sequence[ReportRow], minimal_labels: int) -> Optional[float]:
    candidates = [
        row.scores["f1"]["best"] for row in rows
        if row.framework == "ssl" and row.budget is not None and row.budget <= minimal_labels and "f1" in row.scores
    ]
    return max(candidates) if candidates else None


def build_report(
    pipeline: PipelineConfig,
    cases: Sequence[int] = (1, 2, 3, 4),
    overlay_fn=None,
) -> List[Path]:
    """Gather run records of every case that has started and emit the report directory"""
    grid = ScenarioGrid(**pipeline.scenario.grid)
    rows: Dict[str, List[ReportRow]] = {}
    curves: Dict[str, Dict[str, Any]] = {}
    overlays: List[Overlay] = []
    missing: List[str] = []
    plans: Dict[int, Tuple[List[RunCell], Dict[str, List[RunRecord]]]] = {}

    for case in cases:
        cells = plan_scenario(ScenarioConfig.for_case(case), grid)
        records, absent = collect_records(pipeline.runs_dir, cells, grid.folds)
        if not any(records.values()):
            logger.info("Case %d has no runs yet; skipped", case)
            continue
        plans[case] = (cells, records)
        missing.extend(absent)
        rows[f"case{case}"] = [report_row(cell, records[cell.cell_id], grid.folds) for cell in cells]

    minimal_rows = rows.get("case2", []) + rows.get("case1", [])
    for case, (cells, records) in plans.items():
        if case == 1:
            curves["case1_f1_vs_pretext_fraction"] = pretext_fraction_curves(cells, records)
        elif case == 3:
            curves["case3_f1_vs_label_budget"] = budget_curves(cells, records, _best_ssl_minimal(minimal_rows, grid.minimal_labels))
        elif case == 4:
            curves["case4_f1_vs_main_share"] = fraction_curves(cells, records)
        if overlay_fn is not None and case == 2:
            for cell in cells:
                for record in records[cell.cell_id][:1]:
                    overlays.extend((f"{cell.cell_id}-fold{record.fold}-{crop_id}", *rest)
                                    for crop_id, *rest in overlay_fn(record))

    metadata = conventions(pipeline.evaluate.threshold, pipeline.evaluate.aggregation, grid.folds)
    metadata["seed"] = pipeline.seed
    return emit_report(rows, curves, overlays, pipeline.report_dir, metadata, missing)
