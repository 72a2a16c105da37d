"""
Tests for the checkpoint directory format
"""

import json

import pytest
import torch

from organoid_checkpoint import (
    DATA_FILE,
    INDEX_FILE,
    META_FILE,
    CheckpointMeta,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from organoid_errors import CorruptBundle, MissingFile, VersionMismatch
from organoid_model import build_unet, freeze_encoder


@pytest.fixture
def bundle(tiny_spec):
    model = freeze_encoder(build_unet(tiny_spec, seed=9))
    meta = CheckpointMeta(task="main", encoder="resnet50", loss="iou", seed=9, epoch=3, architecture=tiny_spec)
    return save_checkpoint(model, meta)


def test_round_trip_is_byte_identical(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    assert list(loaded.tensors) == list(bundle.tensors)
    assert all(torch.equal(loaded.tensors[k], bundle.tensors[k]) for k in bundle.tensors)
    assert loaded.meta == bundle.meta
    write_checkpoint(loaded, tmp_path / "b")
    for name in (META_FILE, INDEX_FILE, DATA_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_batchnorm_counters_keep_integer_dtype(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    loaded = load_checkpoint(tmp_path)
    counters = [name for name in loaded.tensors if name.endswith("num_batches_tracked")]
    assert counters
    assert all(loaded.tensors[name].dtype == torch.int64 for name in counters)


def test_rebuilt_model_matches_and_stays_frozen(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    model = model_from_checkpoint(load_checkpoint(tmp_path))
    assert model.frozen_names == bundle.meta.frozen_names
    assert all(torch.equal(model.state_dict()[k], v) for k, v in bundle.tensors.items())
    x = torch.rand(1, 1, 32, 32)
    original = build_unet(bundle.meta.architecture.model_copy(update={"freeze_encoder": False}), 0)
    original.load_state_dict(bundle.tensors)
    assert torch.equal(model.eval()(x), original.eval()(x))


def test_missing_directory(tmp_path):
    with pytest.raises(MissingFile):
        load_checkpoint(tmp_path / "absent")


def test_truncated_tensor_file(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    data = tmp_path / DATA_FILE
    data.write_bytes(data.read_bytes()[:-4])
    with pytest.raises(CorruptBundle):
        load_checkpoint(tmp_path)


def test_trailing_bytes(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    with open(tmp_path / DATA_FILE, "ab") as stream:
        stream.write(b"\0\0\0\0")
    with pytest.raises(CorruptBundle):
        load_checkpoint(tmp_path)


def test_bad_index_json(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    (tmp_path / INDEX_FILE).write_text("{not json", encoding="utf-8")
    with pytest.raises(CorruptBundle):
        load_checkpoint(tmp_path)


def test_unknown_dtype(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    index = json.loads((tmp_path / INDEX_FILE).read_text(encoding="utf-8"))
    index["tensors"][0]["dtype"] = "f16"
    (tmp_path / INDEX_FILE).write_text(json.dumps(index), encoding="utf-8")
    with pytest.raises(CorruptBundle):
        load_checkpoint(tmp_path)


def test_version_mismatch(bundle, tmp_path):
    write_checkpoint(bundle, tmp_path)
    meta = json.loads((tmp_path / META_FILE).read_text(encoding="utf-8"))
    meta["format_version"] = 2
    (tmp_path / META_FILE).write_text(json.dumps(meta), encoding="utf-8")
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path)


def test_frozen_names_must_exist(bundle):
    with pytest.raises(CorruptBundle):
        type(bundle)(tensors={}, meta=bundle.meta)
