"""
Organoid Training
Pretext restoration and main-task segmentation loops (Adam, best-validation-epoch selection),
the crop dataset both read from, and the single-fold job that trains, scores and records a run
"""

import copy
import json
import logging
import math
import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from organoid_augment import AugmentationSpec, derive_seed
from organoid_checkpoint import (
    CheckpointBundle,
    CheckpointMeta,
    load_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from organoid_config import atomic_write_text, write_resolved_config
from organoid_errors import ConfigMismatch, EmptyDataset, MissingFile, OrganoidRuntimeError, ValidatedModel
from organoid_evaluate import MetricsRecord, evaluate_checkpoint
from organoid_imaging import CropInfo, read_crop
from organoid_logging import progress_enabled
from organoid_losses import MAIN_LOSSES, PRETEXT_LOSSES, build_loss
from organoid_model import (
    ArchitectureSpec,
    UNet,
    build_unet,
    freeze_encoder,
    reinitialize_decoder,
    trainable_parameters,
    transfer_weights,
)
from organoid_splits import DatasetManifest, fold_partition, make_folds, pretext_subset, split_ids

logger = logging.getLogger(__name__)

TRAIN_CONFIG_NAME = "train_config.json"


class TrainConfig(ValidatedModel):
    """Hyperparameters of one training run"""
    task: Literal["pretext", "main"] = Field(description="Restoration pretext or segmentation main task")
    loss: str = Field(description="ssim / ssim-l1 for pretext; bce / dice / iou for main")
    encoder: Literal["resnet50", "simple_cnn"] = Field(default="resnet50", description="Encoder family")
    freeze_encoder: bool = Field(default=False, description="Supervised runs only; SSL main runs always freeze")
    augmentation: Optional[str] = Field(default=None, description="Pretext corruption: pixel-drop:<f>, blur, sobel")
    epochs: int = Field(default=50, ge=1, description="Passes over the training crops")
    batch_size: int = Field(default=16, ge=1, description="Crops per optimiser step")
    optimizer: Literal["adam"] = Field(default="adam", description="Plain Adam, no schedule")
    learning_rate: float = Field(default=0.003, gt=0, description="Adam step size")
    betas: Tuple[float, float] = Field(default=(0.9, 0.999), description="Adam moment decay rates")
    eps: float = Field(default=1e-8, gt=0, description="Adam denominator term")
    seed: int = Field(default=26, description="Initialisation, batch order and corruption seed")
    fixed_corruption: bool = Field(default=False, description="Same corruption of a crop in every epoch")
    decoder_init: Literal["pretext", "fresh"] = Field(default="pretext", description="SSL main: keep or re-draw the pretext decoder")
    device: str = Field(default="cpu", description="torch device")
    num_workers: int = Field(default=0, ge=0, description="DataLoader workers")

    @model_validator(mode="after")
    def _check_augmentation(self):
        if self.augmentation is not None:
            AugmentationSpec.parse(self.augmentation, self.seed)
        return self

    def augmentation_spec(self) -> Optional[AugmentationSpec]:
        return AugmentationSpec.parse(self.augmentation, self.seed) if self.augmentation else None


class TrainingHistory(BaseModel):
    train_losses: List[float] = Field(default_factory=list, description="Mean training loss per epoch")
    validation_losses: List[float] = Field(default_factory=list, description="Mean validation loss per epoch")
    best_epoch: int = Field(default=0, description="Epoch whose weights were kept")
    seconds: float = Field(default=0.0, description="Wall-clock training time")


class RunRecord(ValidatedModel):
    """One fold of one configuration, as written to run_record.json"""
    config: TrainConfig = Field(description="Hyperparameters of the main-task run")
    fold: int = Field(ge=0, description="Cross-validation fold")
    cell_id: str = Field(default="", description="Scenario cell the run belongs to")
    train_losses: List[float] = Field(description="Mean training loss per epoch")
    validation_losses: List[float] = Field(description="Mean validation loss per epoch")
    best_epoch: int = Field(default=0, ge=0, description="Epoch the checkpoint was taken from")
    checkpoint: str = Field(default="", description="Checkpoint directory")
    seconds: float = Field(default=0.0, ge=0, description="Wall-clock seconds")
    metrics: Optional[MetricsRecord] = Field(default=None, description="Scores on the evaluation split")
    status: Literal["complete", "failed", "planned"] = Field(default="complete", description="Run outcome")
    context: Dict[str, Any] = Field(default_factory=dict, description="Scenario axis values, e.g. label budget")

    @model_validator(mode="after")
    def _check_curves(self):
        if self.status == "complete":
            for name in ("train_losses", "validation_losses"):
                curve = getattr(self, name)
                if curve and len(curve) != self.config.epochs:
                    raise OrganoidRuntimeError(f"{name} has {len(curve)} entries for {self.config.epochs} epochs")
        return self


class OrganoidCropDataset(Dataset):
    """Crops from the store; pretext items are (corrupted, clean), main items are (image, mask)"""

    def __init__(
        self,
        crop_dir,
        infos: Sequence[CropInfo],
        task: Literal["pretext", "main"],
        augmentation: Optional[AugmentationSpec] = None,
        fixed_corruption: bool = False,
        cache: bool = False,
    ):
        if task == "pretext" and augmentation is None:
            raise ConfigMismatch("pretext crops need an augmentation")
        self.crop_dir = Path(crop_dir)
        self.infos = list(infos)
        self.task = task
        self.augmentation = augmentation
        self.fixed_corruption = fixed_corruption
        self.epoch: Optional[int] = 0
        self._cache: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = {} if cache else None

    def set_epoch(self, epoch: Optional[int]) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.infos)

    def _pixels(self, info: CropInfo) -> Tuple[np.ndarray, np.ndarray]:
        if self._cache is not None and info.crop_id in self._cache:
            return self._cache[info.crop_id]
        crop = read_crop(self.crop_dir, info)
        pixels = (crop.image.astype(np.float32), crop.mask.astype(np.float32))
        if self._cache is not None:
            self._cache[info.crop_id] = pixels
        return pixels

    def __getitem__(self, index):
        info = self.infos[index]
        image, mask = self._pixels(info)
        if self.task == "main":
            return torch.from_numpy(image)[None], torch.from_numpy(mask)[None]
        epoch = None if self.fixed_corruption else self.epoch
        seed = derive_seed(self.augmentation.seed, epoch, info.crop_id)
        corrupted = self.augmentation.apply(image, seed).astype(np.float32)
        return torch.from_numpy(corrupted)[None], torch.from_numpy(image)[None]


def _infos(manifest: DatasetManifest, ids: Sequence[str]) -> List[CropInfo]:
    entries = manifest.by_id()
    missing = [crop_id for crop_id in ids if crop_id not in entries]
    if missing:
        raise MissingFile(f"{len(missing)} crop ids are not in the manifest, e.g. '{missing[0]}'")
    return [entries[crop_id] for crop_id in ids]


def _loader(dataset: OrganoidCropDataset, cfg: TrainConfig, shuffle: bool) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(cfg.seed)
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=cfg.num_workers,
        drop_last=False,
    )


def _mean_loss(model: UNet, loader: DataLoader, loss_fn, device: str) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for inputs, targets in loader:
            inputs, targets = inputs.to(device), targets.to(device)
            total += float(loss_fn(targets, model(inputs))) * len(inputs)
            count += len(inputs)
    return total / max(count, 1)


def fit(
    model: UNet,
    train_set: OrganoidCropDataset,
    validation_set: Optional[OrganoidCropDataset],
    cfg: TrainConfig,
    label: str = "",
) -> TrainingHistory:
    """Adam over the trainable tensors; the weights of the lowest validation-loss epoch are restored"""
    if len(train_set) == 0:
        raise EmptyDataset(f"{label or cfg.task}: no training crops")
    device = cfg.device
    model.to(device)
    loss_fn = build_loss(cfg.loss)
    optimizer = torch.optim.Adam(trainable_parameters(model), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    train_loader = _loader(train_set, cfg, shuffle=True)
    validation_loader = _loader(validation_set, cfg, shuffle=False) if validation_set is not None and len(validation_set) else None
    if validation_set is not None:
        # validation corruption does not vary, so epochs are comparable
        validation_set.set_epoch(None)

    history = TrainingHistory()
    best_loss, best_state = math.inf, None
    started = time.perf_counter()
    epochs = tqdm(range(cfg.epochs), desc=label or cfg.task, unit="epoch", disable=not progress_enabled())
    for epoch in epochs:
        train_set.set_epoch(epoch)
        model.train()
        total, count = 0.0, 0
        for inputs, targets in train_loader:
            inputs, targets = inputs.to(device), targets.to(device)
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(targets, model(inputs))
            if not torch.isfinite(loss):
                raise OrganoidRuntimeError(f"{label or cfg.task}: non-finite {cfg.loss} loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(inputs)
            count += len(inputs)
        train_loss = total / count
        validation_loss = _mean_loss(model, validation_loader, loss_fn, device) if validation_loader else train_loss
        history.train_losses.append(train_loss)
        history.validation_losses.append(validation_loss)
        if validation_loss < best_loss:
            best_loss, history.best_epoch = validation_loss, epoch
            best_state = copy.deepcopy({name: t.detach().cpu() for name, t in model.state_dict().items()})
        epochs.set_postfix(train=f"{train_loss:.4f}", val=f"{validation_loss:.4f}")
        logger.debug("%s epoch %d: train %.5f, validation %.5f", label or cfg.task, epoch, train_loss, validation_loss)

    if best_state is None:
        raise OrganoidRuntimeError(f"{label or cfg.task}: no finite validation loss in {cfg.epochs} epochs")
    model.load_state_dict(best_state)
    model.train(False)
    history.seconds = time.perf_counter() - started
    logger.info(
        "%s: best epoch %d of %d, validation loss %.5f (%.1fs)",
        label or cfg.task, history.best_epoch, cfg.epochs, best_loss, history.seconds,
    )
    return history


def _meta(model: UNet, cfg: TrainConfig, epoch: int) -> CheckpointMeta:
    return CheckpointMeta(
        task=cfg.task,
        encoder=model.spec.encoder,
        loss=cfg.loss,
        augmentation=cfg.augmentation,
        seed=cfg.seed,
        epoch=epoch,
        architecture=model.spec,
    )


def _require(cfg: TrainConfig, spec: ArchitectureSpec, task: str, losses: Sequence[str]) -> None:
    if cfg.task != task:
        raise ConfigMismatch(f"a {cfg.task} config cannot drive {task} training")
    if cfg.loss not in losses:
        raise ConfigMismatch(f"loss '{cfg.loss}' is not a {task} loss; expected one of {list(losses)}")
    if spec.encoder != cfg.encoder:
        raise ConfigMismatch(f"architecture encoder '{spec.encoder}' differs from config encoder '{cfg.encoder}'")


def fit_pretext(
    manifest: DatasetManifest,
    subset_ids: Sequence[str],
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    crop_dir,
    validation_ids: Sequence[str] = (),
) -> Tuple[CheckpointBundle, TrainingHistory]:
    _require(cfg, spec, "pretext", PRETEXT_LOSSES)
    augmentation = cfg.augmentation_spec()
    if augmentation is None:
        raise ConfigMismatch("pretext training needs an augmentation")
    spec = spec.model_copy(update={"head": "restoration", "freeze_encoder": False})
    model = build_unet(spec, cfg.seed)
    train_set = OrganoidCropDataset(crop_dir, _infos(manifest, subset_ids), "pretext", augmentation, cfg.fixed_corruption)
    validation_set = (
        OrganoidCropDataset(crop_dir, _infos(manifest, validation_ids), "pretext", augmentation)
        if validation_ids else None
    )
    history = fit(model, train_set, validation_set, cfg, label=f"pretext {augmentation.label}/{cfg.loss}")
    return save_checkpoint(model, _meta(model, cfg, history.best_epoch)), history


def train_pretext(
    manifest: DatasetManifest,
    subset_ids: Sequence[str],
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    crop_dir,
    validation_ids: Sequence[str] = (),
) -> CheckpointBundle:
    """Restore corrupted crops to their clean originals; encoder and decoder both learn"""
    return fit_pretext(manifest, subset_ids, spec, cfg, crop_dir, validation_ids)[0]


def main_model(spec: ArchitectureSpec, cfg: TrainConfig, pretext_ckpt: Optional[CheckpointBundle]) -> UNet:
    """SSL: pretext weights, frozen encoder. Supervised: random weights, frozen per config."""
    if pretext_ckpt is None:
        return build_unet(spec.model_copy(update={"head": "segmentation", "freeze_encoder": cfg.freeze_encoder}), cfg.seed)
    if pretext_ckpt.meta.task != "pretext":
        raise ConfigMismatch("SSL main training needs a pretext checkpoint")
    if pretext_ckpt.meta.encoder != spec.encoder:
        raise ConfigMismatch(f"pretext encoder '{pretext_ckpt.meta.encoder}' differs from '{spec.encoder}'")
    model = build_unet(spec.model_copy(update={"head": "segmentation", "freeze_encoder": False}), cfg.seed)
    transfer_weights(pretext_ckpt, model, "encoder_and_decoder", cfg.seed)
    if cfg.decoder_init == "fresh":
        reinitialize_decoder(model, cfg.seed)
    freeze_encoder(model)
    model.spec = model.spec.model_copy(update={"freeze_encoder": True})
    return model


def fit_main(
    manifest: DatasetManifest,
    label_ids: Sequence[str],
    pretext_ckpt: Optional[CheckpointBundle],
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    crop_dir,
    validation_ids: Sequence[str] = (),
) -> Tuple[CheckpointBundle, TrainingHistory]:
    _require(cfg, spec, "main", MAIN_LOSSES)
    model = main_model(spec, cfg, pretext_ckpt)
    train_set = OrganoidCropDataset(crop_dir, _infos(manifest, label_ids), "main", cache=True)
    validation_set = (
        OrganoidCropDataset(crop_dir, _infos(manifest, validation_ids), "main", cache=True)
        if validation_ids else None
    )
    mode = "ssl" if pretext_ckpt is not None else "supervised"
    history = fit(model, train_set, validation_set, cfg, label=f"{mode} {spec.encoder}/{cfg.loss}")
    return save_checkpoint(model, _meta(model, cfg, history.best_epoch)), history


def train_main(
    manifest: DatasetManifest,
    label_ids: Sequence[str],
    pretext_ckpt: Optional[CheckpointBundle],
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    crop_dir,
    validation_ids: Sequence[str] = (),
) -> CheckpointBundle:
    """Segmentation training; with a pretext checkpoint only the decoder and head learn"""
    return fit_main(manifest, label_ids, pretext_ckpt, spec, cfg, crop_dir, validation_ids)[0]


def pretext_key(cfg: TrainConfig, fraction: float, manifest_id: str) -> str:
    augmentation = (cfg.augmentation or "none").replace(":", "")
    return f"{cfg.encoder}_{augmentation}_{cfg.loss}_f{fraction:g}_e{cfg.epochs}_s{cfg.seed}_{manifest_id}"


def pretext_dir(runs_dir, cfg: TrainConfig, fraction: float, manifest_id: str) -> Path:
    return Path(runs_dir) / "pretext" / pretext_key(cfg, fraction, manifest_id)


def cached_pretext(
    manifest: DatasetManifest,
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    fraction: float,
    crop_dir,
    runs_dir,
    manifest_id: str = "",
) -> CheckpointBundle:
    """Pretext weights for (augmentation, loss, fraction), trained once and reused"""
    directory = pretext_dir(runs_dir, cfg, fraction, manifest_id or manifest.created_from)
    if (directory / "checkpoint").is_dir():
        logger.info("Reusing pretext checkpoint %s", directory)
        return load_checkpoint(directory / "checkpoint")
    subset = pretext_subset(manifest, fraction)
    bundle, history = fit_pretext(manifest, subset.train, spec, cfg, crop_dir, subset.validate_ids)
    write_checkpoint(bundle, directory / "checkpoint")
    write_resolved_config(cfg, directory, TRAIN_CONFIG_NAME)
    payload = {"fraction": fraction, "train": len(subset.train), "validate": len(subset.validate_ids),
               **history.model_dump()}
    atomic_write_text(directory / "history.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return bundle


def run_fold(
    manifest: DatasetManifest,
    crop_dir,
    label_ids: Sequence[str],
    fold: int,
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    run_dir,
    pretext_ckpt: Optional[CheckpointBundle] = None,
    k: int = 5,
    cell_id: str = "",
    threshold: float = 0.5,
    aggregation: Literal["macro", "micro"] = "macro",
    context: Optional[Dict[str, Any]] = None,
) -> RunRecord:
    """Train on k-1 folds of the labelled ids, select on the held-out fold, score on the evaluation split"""
    folds = make_folds(list(label_ids), k, cfg.seed)
    train_ids, validation_ids = fold_partition(folds, fold)
    fold_dir = Path(run_dir) / f"fold_{fold}"
    write_resolved_config(cfg, fold_dir, TRAIN_CONFIG_NAME)

    bundle, history = fit_main(manifest, train_ids, pretext_ckpt, spec, cfg, crop_dir, validation_ids)
    write_checkpoint(bundle, fold_dir / "checkpoint")
    evaluation = _infos(manifest, split_ids(manifest, "evaluation"))
    record = RunRecord(
        config=cfg,
        fold=fold,
        cell_id=cell_id,
        train_losses=history.train_losses,
        validation_losses=history.validation_losses,
        best_epoch=history.best_epoch,
        checkpoint=str(fold_dir / "checkpoint"),
        seconds=history.seconds,
        metrics=evaluate_checkpoint(
            bundle, evaluation, crop_dir, fold, threshold, aggregation, cfg.batch_size, cfg.device
        ),
        context=dict(context or {}, labels=len(label_ids), train=len(train_ids), validate=len(validation_ids)),
    )
    write_run_record(record, fold_dir)
    return record


def write_run_record(record: RunRecord, fold_dir) -> Path:
    target = Path(fold_dir) / "run_record.json"
    atomic_write_text(target, json.dumps(record.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return target


def read_run_record(fold_dir) -> RunRecord:
    target = Path(fold_dir) / "run_record.json"
    if not target.exists():
        raise MissingFile(f"no run record at {target}")
    return RunRecord(**json.loads(target.read_text(encoding="utf-8")))
