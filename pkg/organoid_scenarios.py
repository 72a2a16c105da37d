"""
Organoid Experiment Scenarios
The four experiment cases expanded into run cells, and the runner that trains every cell's folds
(in-process, through an injected runner, or as parallel fold jobs)
"""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence

from pydantic import ConfigDict, Field

from organoid_augment import STANDARD_AUGMENTATIONS
from organoid_checkpoint import CheckpointBundle
from organoid_config import PipelineConfig, atomic_write_text, resolve_device, write_resolved_config
from organoid_errors import OrganoidError, ValidatedModel
from organoid_losses import MAIN_LOSSES, PRETEXT_LOSSES
from organoid_model import ArchitectureSpec
from organoid_splits import (
    LABEL_BUDGETS,
    MINIMAL_LABELS,
    PRETEXT_FRACTIONS,
    SUPERVISED_FRACTIONS,
    DatasetManifest,
    ScenarioConfig,
    label_budget_subset,
    manifest_hash,
    read_manifest,
    supervised_fraction_subset,
)
from organoid_train import RunRecord, TrainConfig, cached_pretext, pretext_dir, read_run_record, run_fold

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "scenarios"


class ScenarioGrid(ValidatedModel):
    """Axis values of the four cases; the defaults are the full study grid"""
    model_config = ConfigDict(extra="forbid")

    folds: int = Field(default=5, ge=2, description="Cross-validation folds per cell")
    minimal_labels: int = Field(default=MINIMAL_LABELS, ge=1, description="Label budget of cases 1 and 2")
    pretext_fractions: List[float] = Field(default=list(PRETEXT_FRACTIONS), description="Shares of the pretext split")
    pretext_losses: List[str] = Field(default=list(PRETEXT_LOSSES), description="Restoration losses")
    main_losses: List[str] = Field(default=list(MAIN_LOSSES), description="Segmentation losses")
    s1_augmentations: List[str] = Field(default=list(STANDARD_AUGMENTATIONS), description="Corruptions compared in case 1")
    s2_augmentations: List[str] = Field(default=["pixel-drop:0.25", "blur"], description="Best corruptions, reused in case 2")
    s2_encoders: List[Literal["resnet50", "simple_cnn"]] = Field(default=["resnet50", "simple_cnn"], description="Supervised encoders")
    s2_freeze: List[bool] = Field(default=[True, False], description="Supervised encoder freezing")
    s3_budgets: List[int] = Field(default=list(LABEL_BUDGETS), description="Label budgets of case 3")
    s3_augmentation: str = Field(default="blur", description="Corruption of the case 3 SSL runs")
    s3_pretext_loss: str = Field(default="ssim-l1", description="Pretext loss of the case 3 SSL runs")
    s3_main_loss: str = Field(default="iou", description="Segmentation loss of case 3")
    s3_supervised_freeze: List[bool] = Field(default=[False], description="Supervised encoder freezing in case 3")
    s4_fractions: List[float] = Field(default=list(SUPERVISED_FRACTIONS), description="Shares of the main split for case 4")
    s4_losses: List[str] = Field(default=list(MAIN_LOSSES), description="Supervised losses in case 4")
    s4_freeze: List[bool] = Field(default=[False, True], description="Supervised encoder freezing in case 4")
    s4_ssl_references: List[int] = Field(default=[MINIMAL_LABELS, 500, 1000], description="SSL reference label budgets")


class RunCell(ValidatedModel):
    """One configuration of a scenario; trained once per fold"""
    case: int = Field(default=0, ge=0, le=4, description="Experiment case; 0 for a single 'train' run")
    framework: Literal["ssl", "supervised"] = Field(description="Pretext-initialised or trained from scratch")
    encoder: Literal["resnet50", "simple_cnn"] = Field(default="resnet50", description="Encoder family")
    freeze_encoder: bool = Field(default=False, description="Encoder excluded from training")
    main_loss: str = Field(description="Segmentation loss")
    augmentation: Optional[str] = Field(default=None, description="Pretext corruption (ssl)")
    pretext_loss: Optional[str] = Field(default=None, description="Pretext loss (ssl)")
    pretext_fraction: Optional[float] = Field(default=None, description="Share of the pretext split (ssl)")
    label_budget: Optional[int] = Field(default=None, description="Labelled main-task crops")
    supervised_fraction: Optional[float] = Field(default=None, description="Share of the main split")
    role: Literal["grid", "reference"] = Field(default="grid", description="Reference cells only draw comparison lines")

    @property
    def cell_id(self) -> str:
        parts = [f"case{self.case}", self.framework, self.encoder]
        if self.framework == "ssl":
            parts += [self.augmentation.replace(":", ""), self.pretext_loss, f"pf{self.pretext_fraction:g}"]
        else:
            parts.append("frozen" if self.freeze_encoder else "trainable")
        parts.append(self.main_loss)
        parts.append(f"sf{self.supervised_fraction:g}" if self.supervised_fraction is not None else f"n{self.label_budget}")
        if self.role == "reference":
            parts.append("ref")
        return "-".join(parts)

    def axis(self) -> Dict[str, object]:
        return self.model_dump(exclude={"role"})


def _ssl(case, augmentation, pretext_loss, fraction, main_loss, budget, role="grid") -> RunCell:
    return RunCell(case=case, framework="ssl", freeze_encoder=True, main_loss=main_loss, augmentation=augmentation,
                   pretext_loss=pretext_loss, pretext_fraction=fraction, label_budget=budget, role=role)


def _supervised(case, encoder, freeze, main_loss, budget=None, fraction=None) -> RunCell:
    return RunCell(case=case, framework="supervised", encoder=encoder, freeze_encoder=freeze, main_loss=main_loss,
                   label_budget=budget, supervised_fraction=fraction)


def plan_scenario(scenario: ScenarioConfig, grid: Optional[ScenarioGrid] = None) -> List[RunCell]:
    """Every cell of a case, optionally narrowed to the scenario's fixed axis value"""
    grid = grid or ScenarioGrid()
    fractions = [scenario.pretext_fraction] if scenario.pretext_fraction is not None else grid.pretext_fractions
    n = grid.minimal_labels
    cells: List[RunCell] = []
    if scenario.case == 1:
        cells = [
            _ssl(1, augmentation, pretext_loss, fraction, main_loss, n)
            for fraction in fractions
            for augmentation in grid.s1_augmentations
            for pretext_loss in grid.pretext_losses
            for main_loss in grid.main_losses
        ]
    elif scenario.case == 2:
        cells = [
            _ssl(2, augmentation, pretext_loss, fraction, main_loss, n)
            for augmentation in grid.s2_augmentations
            for pretext_loss in grid.pretext_losses
            for fraction in fractions
            for main_loss in grid.main_losses
        ] + [
            _supervised(2, encoder, freeze, main_loss, budget=n)
            for encoder in grid.s2_encoders
            for freeze in grid.s2_freeze
            for main_loss in grid.main_losses
        ]
    elif scenario.case == 3:
        budgets = [scenario.label_budget] if scenario.label_budget is not None else grid.s3_budgets
        cells = [
            _supervised(3, "resnet50", freeze, grid.s3_main_loss, budget=budget)
            for freeze in grid.s3_supervised_freeze
            for budget in budgets
        ] + [
            _ssl(3, grid.s3_augmentation, grid.s3_pretext_loss, fraction, grid.s3_main_loss, budget)
            for fraction in fractions
            for budget in budgets
        ]
    elif scenario.case == 4:
        shares = [scenario.supervised_fraction] if scenario.supervised_fraction is not None else grid.s4_fractions
        cells = [
            _supervised(4, "resnet50", freeze, loss, fraction=share)
            for freeze in grid.s4_freeze
            for loss in grid.s4_losses
            for share in shares
        ] + [
            _ssl(4, grid.s3_augmentation, grid.s3_pretext_loss, 1.0, grid.s3_main_loss, budget, role="reference")
            for budget in grid.s4_ssl_references
        ]
    return cells


FoldRunnerFn = Callable[[RunCell, int], RunRecord]


class FoldRunner:
    """Trains one fold of a cell against the workspace of a pipeline config"""

    def __init__(self, pipeline: PipelineConfig, grid: Optional[ScenarioGrid] = None):
        self.pipeline = pipeline
        self.grid = grid or ScenarioGrid(**pipeline.scenario.grid)
        self.device = resolve_device(pipeline.device)
        self._manifest: Optional[DatasetManifest] = None
        self._pretext: Dict[str, CheckpointBundle] = {}

    @property
    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            self._manifest = read_manifest(self.pipeline.manifest_path)
        return self._manifest

    def spec(self, cell: RunCell) -> ArchitectureSpec:
        training = self.pipeline.training
        return ArchitectureSpec(
            encoder=cell.encoder,
            input_size=training.input_size,
            encoder_blocks=training.blocks,
            decoder_blocks=training.blocks,
            base_channels=training.base_channels,
            freeze_encoder=cell.freeze_encoder,
        )

    def _common(self) -> dict:
        training = self.pipeline.training
        return dict(
            batch_size=training.batch_size,
            learning_rate=training.learning_rate,
            seed=self.pipeline.seed,
            device=self.device,
            num_workers=training.num_workers,
        )

    def main_config(self, cell: RunCell) -> TrainConfig:
        return TrainConfig(
            task="main",
            loss=cell.main_loss,
            encoder=cell.encoder,
            freeze_encoder=cell.freeze_encoder,
            epochs=self.pipeline.main.epochs,
            decoder_init=self.pipeline.main.decoder_init,
            **self._common(),
        )

    def pretext_config(self, cell: RunCell) -> TrainConfig:
        return TrainConfig(
            task="pretext",
            loss=cell.pretext_loss,
            encoder=cell.encoder,
            augmentation=cell.augmentation,
            epochs=self.pipeline.pretext.epochs,
            fixed_corruption=self.pipeline.pretext.fixed_corruption,
            **self._common(),
        )

    def label_ids(self, cell: RunCell) -> List[str]:
        if cell.supervised_fraction is not None:
            return supervised_fraction_subset(self.manifest, cell.supervised_fraction)
        return label_budget_subset(self.manifest, cell.label_budget or self.grid.minimal_labels)

    def pretext(self, cell: RunCell) -> Optional[CheckpointBundle]:
        if cell.framework != "ssl":
            return None
        cfg = self.pretext_config(cell)
        key = f"{cfg.augmentation}|{cfg.loss}|{cell.pretext_fraction}|{cell.encoder}"
        if key not in self._pretext:
            manifest_id = manifest_hash(self.manifest)
            self._pretext[key] = cached_pretext(
                self.manifest, self.spec(cell), cfg, cell.pretext_fraction,
                self.pipeline.crop_dir, self.pipeline.runs_dir, manifest_id,
            )
            write_resolved_config(self.pipeline, pretext_dir(self.pipeline.runs_dir, cfg, cell.pretext_fraction, manifest_id))
        return self._pretext[key]

    def run_dir(self, cell: RunCell) -> Path:
        return self.pipeline.runs_dir / cell.cell_id

    def completed(self, cell: RunCell, fold: int) -> Optional[RunRecord]:
        try:
            record = read_run_record(self.run_dir(cell) / f"fold_{fold}")
        except (OrganoidError, ValueError):
            return None
        return record if record.status == "complete" else None

    def __call__(self, cell: RunCell, fold: int) -> RunRecord:
        done = self.completed(cell, fold)
        if done is not None:
            logger.info("Fold %d of %s already complete", fold, cell.cell_id)
            return done
        write_resolved_config(self.pipeline, self.run_dir(cell))
        return run_fold(
            self.manifest,
            self.pipeline.crop_dir,
            self.label_ids(cell),
            fold,
            self.spec(cell),
            self.main_config(cell),
            self.run_dir(cell),
            pretext_ckpt=self.pretext(cell),
            k=self.grid.folds,
            cell_id=cell.cell_id,
            threshold=self.pipeline.evaluate.threshold,
            aggregation=self.pipeline.evaluate.aggregation,
            context=cell.axis(),
        )


def write_plan(cells: Sequence[RunCell], path) -> Path:
    payload = [dict(cell.model_dump(mode="json"), cell_id=cell.cell_id) for cell in cells]
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return Path(path)


def run_scenario(
    scenario: ScenarioConfig,
    grid: Optional[ScenarioGrid] = None,
    pipeline: Optional[PipelineConfig] = None,
    runner: Optional[FoldRunnerFn] = None,
    parallel_folds: int = 1,
) -> List[RunRecord]:
    """Run every fold of every planned cell; returns one RunRecord per (cell, fold)"""
    pipeline = pipeline or PipelineConfig()
    grid = grid or ScenarioGrid(**pipeline.scenario.grid)
    cells = plan_scenario(scenario, grid)
    logger.info("Case %d: %d cells x %d folds", scenario.case, len(cells), grid.folds)
    if runner is None:
        write_plan(cells, pipeline.runs_dir / f"case{scenario.case}_plan.json")

    if runner is None and parallel_folds > 1:
        from organoid_fold_launcher import launch_folds

        fold_runner = FoldRunner(pipeline, grid)
        for cell in cells:
            # pretext weights are trained once, before fold jobs share them
            fold_runner.pretext(cell)
        return launch_folds(cells, grid.folds, pipeline, parallel_folds)

    runner = runner or FoldRunner(pipeline, grid)
    records = []
    for index, cell in enumerate(cells, start=1):
        logger.info("Cell %d/%d: %s", index, len(cells), cell.cell_id)
        for fold in range(grid.folds):
            records.append(runner(cell, fold))
    return records
