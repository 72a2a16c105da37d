"""
Tests for scenario planning and the fold runner
"""

import json
from collections import Counter

import pytest

from organoid_config import PipelineConfig
from organoid_errors import OrganoidValidationError
from organoid_evaluate import MetricsRecord, aggregate
from organoid_imaging import prepare_crops, read_crop_index, synthesize_to_disk
from organoid_scenarios import FoldRunner, RunCell, ScenarioGrid, plan_scenario, run_scenario
from organoid_splits import ScenarioConfig, make_splits, write_manifest
from organoid_train import RunRecord, TrainConfig


def fake_record(cell: RunCell, fold: int, f1: float = 0.8) -> RunRecord:
    return RunRecord(
        config=TrainConfig(task="main", loss=cell.main_loss, encoder=cell.encoder, epochs=1),
        fold=fold,
        cell_id=cell.cell_id,
        train_losses=[0.5],
        validation_losses=[0.4],
        metrics=MetricsRecord(accuracy=0.9, precision=f1, recall=f1, f1=f1, jaccard=f1 / (2 - f1), fold=fold),
        context=cell.axis(),
    )


class RecordingRunner:
    def __init__(self):
        self.calls = []

    def __call__(self, cell, fold):
        self.calls.append((cell.cell_id, fold))
        return fake_record(cell, fold)


def test_case1_grid():
    cells = plan_scenario(ScenarioConfig.for_case(1))
    assert len(cells) == 90
    assert all(c.framework == "ssl" and c.label_budget == 114 and c.freeze_encoder for c in cells)
    assert Counter(c.pretext_fraction for c in cells) == {0.1: 30, 0.5: 30, 1.0: 30}
    assert len({c.cell_id for c in cells}) == 90


def test_case1_narrowed_to_one_fraction():
    cells = plan_scenario(ScenarioConfig(scenario="S1_pretext_fractions", pretext_fraction=0.5))
    assert len(cells) == 30


def test_case2_grid():
    cells = plan_scenario(ScenarioConfig.for_case(2))
    ssl = [c for c in cells if c.framework == "ssl"]
    supervised = [c for c in cells if c.framework == "supervised"]
    assert len(ssl) == 36 and len(supervised) == 12
    assert {c.augmentation for c in ssl} == {"pixel-drop:0.25", "blur"}
    assert Counter((c.encoder, c.freeze_encoder) for c in supervised) == {
        ("resnet50", True): 3, ("resnet50", False): 3, ("simple_cnn", True): 3, ("simple_cnn", False): 3,
    }


def test_case3_grid():
    cells = plan_scenario(ScenarioConfig.for_case(3))
    supervised = [c for c in cells if c.framework == "supervised"]
    ssl = [c for c in cells if c.framework == "ssl"]
    assert sorted(c.label_budget for c in supervised) == list(range(200, 1001, 100))
    assert len(ssl) == 27
    assert {(c.augmentation, c.pretext_loss, c.main_loss) for c in ssl} == {("blur", "ssim-l1", "iou")}


def test_case4_grid_with_references():
    cells = plan_scenario(ScenarioConfig.for_case(4))
    grid_cells = [c for c in cells if c.role == "grid"]
    references = [c for c in cells if c.role == "reference"]
    fractions = [round(0.1 * i, 1) for i in range(1, 11)]
    assert [c.supervised_fraction for c in grid_cells] == fractions * 6
    assert all(c.framework == "supervised" for c in grid_cells)
    assert Counter((c.freeze_encoder, c.main_loss) for c in grid_cells) == {
        (freeze, loss): 10 for freeze in (False, True) for loss in ("bce", "dice", "iou")
    }
    assert sorted(c.label_budget for c in references) == [114, 500, 1000]


def test_cell_ids():
    cell = plan_scenario(ScenarioConfig.for_case(2))[0]
    assert cell.cell_id == "case2-ssl-resnet50-pixel-drop0.25-ssim-pf0.1-bce-n114"
    supervised = RunCell(case=4, framework="supervised", main_loss="iou", supervised_fraction=0.3)
    assert supervised.cell_id == "case4-supervised-resnet50-trainable-iou-sf0.3"


@pytest.mark.parametrize("case,cells", [(1, 90), (3, 36), (4, 63)])
def test_every_cell_runs_every_fold(case, cells):
    runner = RecordingRunner()
    records = run_scenario(ScenarioConfig.for_case(case), runner=runner)
    assert len(records) == len(runner.calls) == cells * 5
    assert Counter(fold for _, fold in runner.calls) == {fold: cells for fold in range(5)}


def test_grid_overrides_shrink_the_plan():
    grid = ScenarioGrid(folds=2, s3_budgets=[200, 300])
    runner = RecordingRunner()
    records = run_scenario(ScenarioConfig.for_case(3), grid=grid, runner=runner)
    assert len(records) == (2 + 3 * 2) * 2


def test_grid_rejects_unknown_axes():
    with pytest.raises(OrganoidValidationError):
        ScenarioGrid(s5_things=[1])


def test_fold_runner_trains_and_resumes(workspace_copy):
    runner = FoldRunner(workspace_copy)
    assert runner.grid.folds == 2
    ssl = RunCell(framework="ssl", freeze_encoder=True, main_loss="iou", augmentation="blur",
                  pretext_loss="ssim", pretext_fraction=1.0, label_budget=8)
    record = runner(ssl, 0)
    assert record.cell_id == ssl.cell_id
    assert record.context["labels"] == 8
    assert (workspace_copy.runs_dir / ssl.cell_id / "fold_0" / "run_record.json").exists()
    assert len(list((workspace_copy.runs_dir / "pretext").iterdir())) == 1

    again = FoldRunner(workspace_copy)(ssl, 0)
    assert again == record

    supervised = RunCell(framework="supervised", encoder="simple_cnn", main_loss="bce", supervised_fraction=0.5)
    assert len(runner.label_ids(supervised)) == 12
    assert runner.pretext(supervised) is None
    assert runner.main_config(supervised).freeze_encoder is False


def test_scenario_plan_is_written(workspace_copy):
    grid = ScenarioGrid(folds=2, minimal_labels=8, s4_fractions=[0.5], s4_losses=["iou"], s4_freeze=[False],
                        s4_ssl_references=[])
    from organoid_scenarios import write_plan

    path = write_plan(plan_scenario(ScenarioConfig.for_case(4), grid), workspace_copy.runs_dir / "case4_plan.json")
    plan = json.loads(path.read_text(encoding="utf-8"))
    assert [entry["cell_id"] for entry in plan] == ["case4-supervised-resnet50-trainable-iou-sf0.5"]


def _study_pipeline(workspace) -> PipelineConfig:
    return PipelineConfig(
        workspace=str(workspace),
        device="cpu",
        synth={"n_stacks": 6, "slice_width": 192, "slice_height": 192, "n_slices": 2, "min_blobs": 3, "max_blobs": 8},
        prepare={"window": 64, "stride": 32, "resize": 32, "min_object_frac": 0.0},
        pretext={"epochs": 20},
        main={"epochs": 30},
        training={"batch_size": 8, "input_size": 32, "base_channels": 8, "blocks": 2},
        scenario={"grid": {"folds": 5, "minimal_labels": 40}},
    )


@pytest.mark.slow
def test_ssl_keeps_up_with_supervised_on_few_labels(tmp_path):
    """Blur restoration pretraining then a frozen-encoder IoU run against a trainable supervised ResNet"""
    pipeline = _study_pipeline(tmp_path / "study")
    synth, prep = pipeline.synth, pipeline.prepare
    synthesize_to_disk(pipeline.data_dir, synth.n_stacks, (synth.slice_width, synth.slice_height),
                       (synth.min_blobs, synth.max_blobs), pipeline.seed, synth.n_slices)
    prepare_crops(pipeline.data_dir, pipeline.crop_dir, prep.window, prep.stride, prep.resize, prep.min_object_frac)
    write_manifest(make_splits(read_crop_index(pipeline.crop_dir), pipeline.seed), pipeline.manifest_path)

    runner = FoldRunner(pipeline)
    ssl = RunCell(case=2, framework="ssl", freeze_encoder=True, main_loss="iou", augmentation="blur",
                  pretext_loss="ssim-l1", pretext_fraction=1.0, label_budget=40)
    supervised = RunCell(case=2, framework="supervised", freeze_encoder=False, main_loss="iou", label_budget=40)
    ssl_f1 = aggregate([runner(ssl, fold).metrics for fold in range(5)])["f1"]
    supervised_f1 = aggregate([runner(supervised, fold).metrics for fold in range(5)])["f1"]
    assert ssl_f1.mean >= supervised_f1.mean - 0.02
    assert ssl_f1.std <= supervised_f1.std
