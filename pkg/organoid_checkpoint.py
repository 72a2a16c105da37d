"""
Organoid Checkpoints
Named-tensor weight store with run metadata; on disk a directory of meta.json,
tensors.index.json and tensors.bin (little-endian, row-major)
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from organoid_config import atomic_write_bytes, atomic_write_text
from organoid_errors import CorruptBundle, MissingFile, OrganoidValidationError, ValidatedModel, VersionMismatch
from organoid_model import ArchitectureSpec, UNet, build_unet, freeze_encoder

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_FILE = "meta.json"
INDEX_FILE = "tensors.index.json"
DATA_FILE = "tensors.bin"

# index dtype -> (numpy little-endian dtype, torch dtype)
DTYPES = {
    "f32": (np.dtype("<f4"), torch.float32),
    "i64": (np.dtype("<i8"), torch.int64),
}


class CheckpointMeta(BaseModel):
    """What produced a set of weights"""
    task: Literal["pretext", "main"] = Field(description="Restoration pretext or segmentation main task")
    encoder: Literal["resnet50", "simple_cnn"] = Field(description="Encoder family")
    loss: str = Field(description="Loss name used for training")
    augmentation: Optional[str] = Field(default=None, description="Pretext corruption, e.g. pixel-drop:0.25")
    seed: int = Field(description="Seed of the run")
    epoch: int = Field(description="Epoch the weights were taken from (best validation loss)")
    frozen_names: List[str] = Field(default_factory=list, description="Tensors excluded from training")
    architecture: ArchitectureSpec = Field(description="Network shape the tensors belong to")
    format_version: int = Field(default=FORMAT_VERSION, description="On-disk layout version")


class CheckpointBundle(ValidatedModel):
    """Tensors by state-dict name plus their metadata"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    tensors: Dict[str, torch.Tensor] = Field(description="CPU tensors in state-dict order")
    meta: CheckpointMeta = Field(description="Run metadata")

    @model_validator(mode="after")
    def _check_frozen_names(self):
        unknown = [name for name in self.meta.frozen_names if name not in self.tensors]
        if unknown:
            raise CorruptBundle(f"frozen names not present among tensors: {unknown[:5]}")
        return self


def _index_dtype(tensor: torch.Tensor) -> str:
    if tensor.dtype.is_floating_point:
        return "f32"
    if tensor.dtype == torch.int64:
        return "i64"
    raise OrganoidValidationError(f"unsupported tensor dtype {tensor.dtype}")


def save_checkpoint(model: UNet, meta: CheckpointMeta) -> CheckpointBundle:
    """Snapshot a model's state dict (parameters and buffers)"""
    tensors = {}
    for name, tensor in model.state_dict().items():
        tensor = tensor.detach().cpu().clone()
        tensors[name] = tensor.to(torch.float32) if tensor.dtype.is_floating_point else tensor
    meta = meta.model_copy(update={"frozen_names": list(model.frozen_names)})
    return CheckpointBundle(tensors=tensors, meta=meta)


def write_checkpoint(bundle: CheckpointBundle, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in bundle.tensors.items():
        kind = _index_dtype(tensor)
        data = tensor.numpy().astype(DTYPES[kind][0], copy=False).tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": kind,
            "shape": list(tensor.shape),
            "offset": offset,
            "length": len(data),
        })
        chunks.append(data)
        offset += len(data)

    atomic_write_bytes(directory / DATA_FILE, b"".join(chunks))
    index = {"format_version": FORMAT_VERSION, "tensors": entries}
    atomic_write_text(directory / INDEX_FILE, json.dumps(index, indent=2, sort_keys=True) + "\n")
    meta = bundle.meta.model_dump(mode="json")
    atomic_write_text(directory / META_FILE, json.dumps(meta, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    logger.debug("Wrote checkpoint %s: %d tensors, %d bytes", directory, len(entries), offset)
    return directory


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise CorruptBundle(f"checkpoint file missing: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptBundle(f"{path}: {e}") from e


def load_checkpoint(directory) -> CheckpointBundle:
    """Read and validate a checkpoint directory"""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"no checkpoint directory at {directory}")
    index = _read_json(directory / INDEX_FILE)
    raw_meta = _read_json(directory / META_FILE)

    if index.get("format_version") != FORMAT_VERSION or raw_meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{directory}: format version index={index.get('format_version')} "
            f"meta={raw_meta.get('format_version')}, expected {FORMAT_VERSION}"
        )
    data_path = directory / DATA_FILE
    if not data_path.exists():
        raise CorruptBundle(f"checkpoint file missing: {data_path}")
    payload = data_path.read_bytes()

    tensors, expected_offset = {}, 0
    for entry in index.get("tensors", []):
        try:
            name, kind, shape = entry["name"], entry["dtype"], [int(d) for d in entry["shape"]]
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptBundle(f"{directory}: malformed index entry {entry!r}") from e
        if kind not in DTYPES:
            raise CorruptBundle(f"'{name}': unknown dtype '{kind}'")
        np_dtype, torch_dtype = DTYPES[kind]
        if length != math.prod(shape) * np_dtype.itemsize:
            raise CorruptBundle(f"'{name}': length {length} does not match shape {shape} ({kind})")
        if offset != expected_offset or offset + length > len(payload):
            raise CorruptBundle(f"'{name}': bytes {offset}..{offset + length} fall outside the tensor file")
        if name in tensors:
            raise CorruptBundle(f"duplicate tensor name '{name}'")
        values = np.frombuffer(payload, dtype=np_dtype, count=math.prod(shape), offset=offset)
        tensors[name] = torch.from_numpy(values.copy()).reshape(shape).to(torch_dtype)
        expected_offset = offset + length
    if expected_offset != len(payload):
        raise CorruptBundle(f"{data_path}: {len(payload) - expected_offset} trailing bytes not covered by the index")

    try:
        meta = CheckpointMeta(**raw_meta)
    except ValidationError as e:
        raise CorruptBundle(f"{directory}: invalid metadata: {e}") from e
    return CheckpointBundle(tensors=tensors, meta=meta)


def model_from_checkpoint(bundle: CheckpointBundle) -> UNet:
    """Rebuild the network a bundle was saved from, with every tensor restored"""
    model = build_unet(bundle.meta.architecture.model_copy(update={"freeze_encoder": False}), bundle.meta.seed)
    model.load_state_dict(bundle.tensors, strict=True)
    if bundle.meta.frozen_names:
        freeze_encoder(model)
    return model
