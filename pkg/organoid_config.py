"""
Organoid Pipeline Configuration
One pydantic tree for every stage, loaded from JSON, overridden with section.key=value,
with the workspace and device taken from the environment (.env supported)
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from organoid_errors import ConfigValidationError, MissingFile

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_SEED = 26
DEFAULT_WORKSPACE = "./workspace"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthSection(_Section):
    n_stacks: int = Field(default=6, ge=1, description="Synthetic sources to generate")
    slice_width: int = Field(default=1280, ge=1, description="Slice width in pixels")
    slice_height: int = Field(default=960, ge=1, description="Slice height in pixels")
    n_slices: int = Field(default=4, ge=1, description="Focal depths per stack")
    min_blobs: int = Field(default=3, ge=1, description="Fewest organoids per stack")
    max_blobs: int = Field(default=12, ge=1, description="Most organoids per stack")


class PrepareSection(_Section):
    window: int = Field(default=636, ge=1, description="Square window edge at native resolution")
    stride: int = Field(default=60, ge=1, description="Step between window origins")
    resize: int = Field(default=320, ge=1, description="Edge of the resized crop")
    min_object_frac: float = Field(default=0.05, ge=0, le=1, description="Windows below this foreground share are dropped")
    format: Literal["raster_dir", "stacked_raster"] = Field(default="raster_dir", description="How slices are stored")


class SplitSection(_Section):
    pretext_share: float = Field(default=0.4, description="Share of base windows for the pretext split")
    main_share: float = Field(default=0.4, description="Share of base windows for the main split")
    folds: int = Field(default=5, ge=2, description="Cross-validation folds")


class PretextSection(_Section):
    augmentation: str = Field(default="blur", description="pixel-drop:<f>, blur or sobel")
    loss: Literal["ssim", "ssim-l1"] = Field(default="ssim-l1", description="Restoration loss")
    fraction: float = Field(default=1.0, gt=0, le=1, description="Share of the pretext split used")
    epochs: int = Field(default=50, ge=1, description="Pretext epochs")
    fixed_corruption: bool = Field(default=False, description="One corruption per crop instead of per epoch")


class MainSection(_Section):
    mode: Literal["ssl", "supervised"] = Field(default="ssl", description="Start from pretext weights or from scratch")
    encoder: Literal["resnet50", "simple_cnn"] = Field(default="resnet50", description="Encoder family")
    freeze_encoder: bool = Field(default=False, description="Freeze the encoder in supervised mode (always frozen in ssl)")
    loss: Literal["bce", "dice", "iou"] = Field(default="iou", description="Segmentation loss")
    labels: int = Field(default=114, ge=1, description="Label budget: training images drawn from the main split")
    epochs: int = Field(default=50, ge=1, description="Main-task epochs")
    decoder_init: Literal["pretext", "fresh"] = Field(default="pretext", description="Keep or re-draw decoder weights after transfer")


class TrainingSection(_Section):
    batch_size: int = Field(default=16, ge=1, description="Crops per optimiser step")
    learning_rate: float = Field(default=0.003, gt=0, description="Adam learning rate")
    input_size: int = Field(default=320, ge=1, description="Network input edge")
    base_channels: int = Field(default=64, ge=1, description="Width of the first encoder block")
    blocks: int = Field(default=4, ge=1, description="Encoder and decoder blocks")
    num_workers: int = Field(default=0, ge=0, description="DataLoader worker processes")


class EvaluateSection(_Section):
    threshold: float = Field(default=0.5, ge=0, le=1, description="Probability at or above which a pixel is foreground")
    aggregation: Literal["macro", "micro"] = Field(default="macro", description="Average per image, or pool counts")
    overlays: int = Field(default=4, ge=0, description="Overlay images rendered per fold")


class ScenarioSection(_Section):
    case: Optional[int] = Field(default=None, ge=1, le=4, description="Experiment case 1-4")
    parallel_folds: int = Field(default=1, ge=1, description="Fold jobs run at once")
    grid: Dict[str, Any] = Field(default_factory=dict, description="Overrides of the scenario grid axes")


class ReportSection(_Section):
    strict: bool = Field(default=False, description="Fail when folds are missing instead of flagging gaps")


class PipelineConfig(_Section):
    """Fully-resolved settings of one invocation; written beside every run's outputs"""
    seed: int = Field(default=DEFAULT_SEED, description="Funnels all randomness")
    workspace: str = Field(default=DEFAULT_WORKSPACE, description="Root of data, crops, manifests, runs and reports")
    device: str = Field(default="auto", description="cpu, cuda or auto")
    synth: SynthSection = Field(default_factory=SynthSection)
    prepare: PrepareSection = Field(default_factory=PrepareSection)
    split: SplitSection = Field(default_factory=SplitSection)
    pretext: PretextSection = Field(default_factory=PretextSection)
    main: MainSection = Field(default_factory=MainSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    report: ReportSection = Field(default_factory=ReportSection)

    @property
    def root(self) -> Path:
        return Path(self.workspace)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def crop_dir(self) -> Path:
        return self.root / "crops"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"


def atomic_write_bytes(target, payload: bytes) -> None:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(handle, "wb") as stream:
            stream.write(payload)
        os.replace(temp_name, target)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise


def atomic_write_text(target, text: str) -> None:
    atomic_write_bytes(target, text.encode("utf-8"))


def _coerce(raw: str):
    """JSON literal when it parses (numbers, true/false, null), the raw string otherwise"""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: PipelineConfig, overrides: Sequence[str]) -> PipelineConfig:
    """Apply 'section.key=value' (or top-level 'key=value') assignments; unknown keys are rejected"""
    data = cfg.model_dump()
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigValidationError(item, "expected key=value")
        node, parts = data, key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigValidationError(key, "no such config section")
            node = node[part]
        # scenario.grid is free-form here; ScenarioGrid checks its axis names
        free_form = parts[:-1] == ["scenario", "grid"]
        if not free_form and (parts[-1] not in node or isinstance(node[parts[-1]], dict)):
            raise ConfigValidationError(key, "no such config key")
        node[parts[-1]] = _coerce(raw.strip())
    return _validated(data, origin="overrides")


def _validated(data: dict, origin: str) -> PipelineConfig:
    try:
        return PipelineConfig(**data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or origin
        raise ConfigValidationError(key, first["msg"]) from e


def load_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    workspace: Optional[str] = None,
    seed: Optional[int] = None,
) -> PipelineConfig:
    """Defaults, then the config file, then the environment, then flags and overrides"""
    data: dict = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise MissingFile(f"config file not found: {config_path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigValidationError(str(config_path), f"not valid JSON: {e}") from e
    if "workspace" not in data and os.getenv("ORGANOID_WORKSPACE"):
        data["workspace"] = os.getenv("ORGANOID_WORKSPACE")
    if "device" not in data and os.getenv("ORGANOID_DEVICE"):
        data["device"] = os.getenv("ORGANOID_DEVICE")
    if workspace is not None:
        data["workspace"] = workspace
    if seed is not None:
        data["seed"] = seed
    cfg = _validated(data, origin=path or "defaults")
    return apply_overrides(cfg, overrides) if overrides else cfg


def write_resolved_config(cfg: BaseModel, directory, name: str = "config.json") -> Path:
    """Resolved settings beside a run's outputs, stable key order"""
    target = Path(directory) / name
    atomic_write_text(target, json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return target


def resolve_device(requested: str = "auto") -> str:
    import torch

    if requested == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    if requested.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("⚠️ CUDA requested but unavailable; falling back to CPU")
        return "cpu"
    return requested


def known_keys(cfg: Optional[PipelineConfig] = None) -> List[str]:
    """Every dotted key accepted by apply_overrides"""
    def walk(node: dict, prefix: str):
        for key, value in node.items():
            if isinstance(value, dict):
                yield from walk(value, f"{prefix}{key}.")
            else:
                yield f"{prefix}{key}"
    return sorted(walk((cfg or PipelineConfig()).model_dump(), ""))
