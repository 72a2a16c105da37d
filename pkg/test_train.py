"""
Tests for pretext and main-task training on the tiny prepared workspace
"""

import json

import numpy as np
import pytest
import torch

from organoid_augment import AugmentationSpec
from organoid_checkpoint import load_checkpoint, model_from_checkpoint
from organoid_errors import ConfigMismatch, EmptyDataset, OrganoidRuntimeError
from organoid_evaluate import fold_metrics, score_crops
from organoid_model import build_unet, encoder_tensor_names
from organoid_splits import label_budget_subset, pretext_subset, read_manifest, split_ids
from organoid_train import (
    OrganoidCropDataset,
    RunRecord,
    TrainConfig,
    cached_pretext,
    fit_main,
    fit_pretext,
    read_run_record,
    run_fold,
)


def _pretext_cfg(**kw):
    return TrainConfig(**{"task": "pretext", "loss": "ssim-l1", "augmentation": "blur", "epochs": 1,
                          "batch_size": 4, **kw})


def _main_cfg(**kw):
    return TrainConfig(**{"task": "main", "loss": "iou", "epochs": 1, "batch_size": 4, **kw})


@pytest.fixture
def manifest(prepared_workspace):
    return read_manifest(prepared_workspace.manifest_path)


def test_pretext_items_are_corrupted_clean_pairs(prepared_workspace, manifest):
    infos = [manifest.by_id()[i] for i in split_ids(manifest, "pretext")[:2]]
    spec = AugmentationSpec.parse("pixel-drop:0.5")
    dataset = OrganoidCropDataset(prepared_workspace.crop_dir, infos, "pretext", spec)
    corrupted, clean = dataset[0]
    assert corrupted.shape == clean.shape == (1, 32, 32)
    assert int((corrupted == 0).sum()) >= 512
    dataset.set_epoch(1)
    assert not torch.equal(dataset[0][0], corrupted)

    fixed = OrganoidCropDataset(prepared_workspace.crop_dir, infos, "pretext", spec, fixed_corruption=True)
    first = fixed[0][0]
    fixed.set_epoch(5)
    assert torch.equal(fixed[0][0], first)


def test_main_items_are_image_mask_pairs(prepared_workspace, manifest):
    infos = [manifest.by_id()[i] for i in split_ids(manifest, "main")[:1]]
    image, mask = OrganoidCropDataset(prepared_workspace.crop_dir, infos, "main")[0]
    assert image.shape == mask.shape == (1, 32, 32)
    assert set(torch.unique(mask).tolist()) <= {0.0, 1.0}


def test_pretext_dataset_needs_augmentation(prepared_workspace):
    with pytest.raises(ConfigMismatch):
        OrganoidCropDataset(prepared_workspace.crop_dir, [], "pretext")


def test_ssl_main_training_keeps_encoder_bit_exact(prepared_workspace, manifest, tiny_spec):
    subset = pretext_subset(manifest, 0.5)
    pretext, history = fit_pretext(manifest, subset.train, tiny_spec, _pretext_cfg(), prepared_workspace.crop_dir,
                                   subset.validate_ids)
    assert len(history.train_losses) == 1
    assert pretext.meta.architecture.head == "restoration"

    labels = label_budget_subset(manifest, 8)
    bundle, _ = fit_main(manifest, labels, pretext, tiny_spec, _main_cfg(epochs=2), prepared_workspace.crop_dir)
    encoder = encoder_tensor_names(build_unet(tiny_spec))
    assert bundle.meta.frozen_names == encoder
    for name in encoder:
        assert torch.equal(bundle.tensors[name], pretext.tensors[name]), name
    assert any(
        not torch.equal(bundle.tensors[name], pretext.tensors[name])
        for name in bundle.tensors if name.startswith("decoder.")
    )


def test_supervised_training_is_deterministic(prepared_workspace, manifest, tiny_cnn_spec):
    labels = label_budget_subset(manifest, 8)
    cfg = _main_cfg(encoder="simple_cnn", epochs=2, loss="dice")
    first, history_a = fit_main(manifest, labels, None, tiny_cnn_spec, cfg, prepared_workspace.crop_dir)
    second, history_b = fit_main(manifest, labels, None, tiny_cnn_spec, cfg, prepared_workspace.crop_dir)
    assert history_a.train_losses == history_b.train_losses
    assert all(torch.equal(first.tensors[k], second.tensors[k]) for k in first.tensors)
    assert first.meta.frozen_names == []


def test_config_mismatches(prepared_workspace, manifest, tiny_spec, tiny_cnn_spec):
    labels = label_budget_subset(manifest, 4)
    crop_dir = prepared_workspace.crop_dir
    with pytest.raises(ConfigMismatch):
        fit_main(manifest, labels, None, tiny_spec, _pretext_cfg(), crop_dir)
    with pytest.raises(ConfigMismatch):
        fit_main(manifest, labels, None, tiny_spec, _main_cfg(loss="ssim"), crop_dir)
    with pytest.raises(ConfigMismatch):
        fit_main(manifest, labels, None, tiny_cnn_spec, _main_cfg(), crop_dir)
    with pytest.raises(ConfigMismatch):
        fit_pretext(manifest, labels, tiny_spec, _pretext_cfg(augmentation=None), crop_dir)
    with pytest.raises(EmptyDataset):
        fit_main(manifest, [], None, tiny_spec, _main_cfg(), crop_dir)


def test_pretext_checkpoints_are_cached(workspace_copy, tiny_spec):
    cfg = workspace_copy
    manifest = read_manifest(cfg.manifest_path)
    first = cached_pretext(manifest, tiny_spec, _pretext_cfg(), 0.5, cfg.crop_dir, cfg.runs_dir, "m1")
    directories = list((cfg.runs_dir / "pretext").iterdir())
    assert len(directories) == 1
    history = json.loads((directories[0] / "history.json").read_text(encoding="utf-8"))
    assert history["train"] + history["validate"] == 12
    second = cached_pretext(manifest, tiny_spec, _pretext_cfg(), 0.5, cfg.crop_dir, cfg.runs_dir, "m1")
    assert all(torch.equal(first.tensors[k], second.tensors[k]) for k in first.tensors)
    assert len(list((cfg.runs_dir / "pretext").iterdir())) == 1


def test_run_fold_writes_a_complete_record(workspace_copy, tiny_spec):
    cfg = workspace_copy
    manifest = read_manifest(cfg.manifest_path)
    labels = label_budget_subset(manifest, 10)
    run_dir = cfg.runs_dir / "single"
    record = run_fold(manifest, cfg.crop_dir, labels, 1, tiny_spec, _main_cfg(epochs=2), run_dir, k=2,
                      cell_id="single", context={"case": 0})
    fold_dir = run_dir / "fold_1"
    assert (fold_dir / "train_config.json").exists()
    assert load_checkpoint(fold_dir / "checkpoint").meta.task == "main"
    assert read_run_record(fold_dir) == record
    assert record.context["train"] + record.context["validate"] == 10
    assert record.context["train"] > 0 and record.context["validate"] > 0
    assert record.metrics.fold == 1
    assert len(record.metrics.per_image) == len(split_ids(manifest, "evaluation"))
    assert len(record.train_losses) == len(record.validation_losses) == 2


def test_run_record_curves_match_epochs():
    with pytest.raises(OrganoidRuntimeError):
        RunRecord(config=_main_cfg(epochs=3), fold=0, train_losses=[1.0], validation_losses=[1.0])


def test_non_finite_validation_loss_fails_the_fit(prepared_workspace, manifest, tiny_cnn_spec, monkeypatch):
    import organoid_train

    monkeypatch.setattr(organoid_train, "_mean_loss", lambda *args, **kwargs: float("nan"))
    labels = label_budget_subset(manifest, 8)
    cfg = _main_cfg(encoder="simple_cnn", loss="bce")
    with pytest.raises(OrganoidRuntimeError, match="no finite validation loss"):
        fit_main(manifest, labels, None, tiny_cnn_spec, cfg, prepared_workspace.crop_dir,
                 validation_ids=label_budget_subset(manifest, 12)[8:])


@pytest.mark.slow
def test_supervised_model_overfits_a_few_crops(prepared_workspace, manifest, tiny_spec):
    """A trainable network memorises four labelled crops"""
    labels = label_budget_subset(manifest, 4)
    cfg = _main_cfg(epochs=200, loss="bce", learning_rate=0.003)
    bundle, _ = fit_main(manifest, labels, None, tiny_spec, cfg, prepared_workspace.crop_dir)
    infos = [manifest.by_id()[i] for i in labels]
    record = fold_metrics(score_crops(model_from_checkpoint(bundle), prepared_workspace.crop_dir, infos),
                          aggregation="macro")
    assert record.f1 >= 0.95
    assert np.isfinite(record.jaccard)
