"""
Tests for the pipeline configuration tree
"""

import json

import pytest

from organoid_config import (
    PipelineConfig,
    apply_overrides,
    known_keys,
    load_config,
    resolve_device,
    write_resolved_config,
)
from organoid_errors import ConfigValidationError, MissingFile


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.seed == 26
    assert (cfg.prepare.window, cfg.prepare.stride, cfg.prepare.resize) == (636, 60, 320)
    assert cfg.training.batch_size == 16
    assert cfg.training.learning_rate == pytest.approx(0.003)
    assert cfg.main.labels == 114
    assert cfg.manifest_path.name == "manifest.json"


def test_overrides_coerce_json_literals():
    cfg = apply_overrides(PipelineConfig(), [
        "training.batch_size=8",
        "main.freeze_encoder=true",
        "pretext.augmentation=pixel-drop:0.25",
        "seed=3",
    ])
    assert cfg.training.batch_size == 8
    assert cfg.main.freeze_encoder is True
    assert cfg.pretext.augmentation == "pixel-drop:0.25"
    assert cfg.seed == 3


@pytest.mark.parametrize("item", ["training.batchsize=8", "nosection.key=1", "training=1", "novalue"])
def test_unknown_keys_are_rejected(item):
    with pytest.raises(ConfigValidationError):
        apply_overrides(PipelineConfig(), [item])


def test_invalid_value_names_the_key():
    with pytest.raises(ConfigValidationError) as info:
        apply_overrides(PipelineConfig(), ["main.loss=focal"])
    assert info.value.key == "main.loss"


def test_load_order(tmp_path, monkeypatch):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 5, "training": {"batch_size": 4}}), encoding="utf-8")
    monkeypatch.setenv("ORGANOID_WORKSPACE", str(tmp_path / "env"))
    cfg = load_config(str(path), ["training.batch_size=2"])
    assert cfg.seed == 5
    assert cfg.training.batch_size == 2
    assert cfg.workspace == str(tmp_path / "env")

    flagged = load_config(str(path), workspace=str(tmp_path / "flag"), seed=9)
    assert flagged.workspace == str(tmp_path / "flag")
    assert flagged.seed == 9


def test_config_file_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_config(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigValidationError):
        load_config(str(bad))
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"training": {"momentum": 0.9}}), encoding="utf-8")
    with pytest.raises(ConfigValidationError):
        load_config(str(extra))


def test_resolved_config_reloads(tmp_path):
    cfg = apply_overrides(PipelineConfig(workspace=str(tmp_path)), ["evaluate.aggregation=micro"])
    target = write_resolved_config(cfg, tmp_path / "run")
    assert load_config(str(target)) == cfg


def test_known_keys():
    keys = known_keys()
    assert "training.batch_size" in keys
    assert "scenario.case" in keys
    assert "seed" in keys


def test_cpu_device_passes_through():
    assert resolve_device("cpu") == "cpu"


def test_scenario_grid_axes_can_be_overridden():
    cfg = apply_overrides(PipelineConfig(), ["scenario.grid.folds=3", 'scenario.grid.s3_budgets=[200,300]'])
    assert cfg.scenario.grid == {"folds": 3, "s3_budgets": [200, 300]}
