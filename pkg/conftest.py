"""
Shared pytest fixtures: tiny architectures and a tiny prepared workspace
"""

import os

import pytest

from organoid_config import PipelineConfig
from organoid_imaging import prepare_crops, read_crop_index, synthesize_to_disk
from organoid_model import ArchitectureSpec
from organoid_splits import make_splits, write_manifest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains for many epochs; run with ORGANOID_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("ORGANOID_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set ORGANOID_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_spec():
    return ArchitectureSpec(encoder="resnet50", input_size=32, encoder_blocks=2, decoder_blocks=2, base_channels=4)


@pytest.fixture
def tiny_cnn_spec():
    return ArchitectureSpec(encoder="simple_cnn", input_size=32, encoder_blocks=2, decoder_blocks=2, base_channels=4)


def tiny_pipeline(workspace) -> PipelineConfig:
    return PipelineConfig(
        workspace=str(workspace),
        device="cpu",
        synth={"n_stacks": 2, "slice_width": 96, "slice_height": 96, "n_slices": 2, "min_blobs": 3, "max_blobs": 5},
        prepare={"window": 64, "stride": 32, "resize": 32, "min_object_frac": 0.0},
        pretext={"epochs": 1},
        main={"epochs": 1, "labels": 8},
        training={"batch_size": 4, "input_size": 32, "base_channels": 4, "blocks": 2},
        evaluate={"overlays": 1},
        scenario={"grid": {"folds": 2, "minimal_labels": 8}},
    )


@pytest.fixture(scope="session")
def prepared_workspace(tmp_path_factory):
    """Two synthetic 96x96 stacks of two slices, tiled 64/32 into 32x32 crops and split"""
    cfg = tiny_pipeline(tmp_path_factory.mktemp("workspace"))
    synth = cfg.synth
    synthesize_to_disk(cfg.data_dir, synth.n_stacks, (synth.slice_width, synth.slice_height),
                       (synth.min_blobs, synth.max_blobs), cfg.seed, synth.n_slices)
    prep = cfg.prepare
    prepare_crops(cfg.data_dir, cfg.crop_dir, prep.window, prep.stride, prep.resize, prep.min_object_frac)
    write_manifest(make_splits(read_crop_index(cfg.crop_dir), cfg.seed), cfg.manifest_path)
    return cfg


@pytest.fixture
def workspace_copy(prepared_workspace, tmp_path):
    """A private copy of the prepared workspace, safe to train into"""
    import shutil

    shutil.copytree(prepared_workspace.root, tmp_path / "ws")
    return prepared_workspace.model_copy(update={"workspace": str(tmp_path / "ws")})
