"""
Organoid Segmentation Evaluation
Thresholding, per-image confusion counts, the metric family, and best/mean/std aggregation over folds
"""

import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field, model_validator

from organoid_checkpoint import CheckpointBundle, model_from_checkpoint
from organoid_errors import DimensionMismatch, EmptyDataset, OrganoidValidationError, ValidatedModel
from organoid_imaging import CropInfo, read_crop
from organoid_model import UNet

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "jaccard")
EMPTY_RULE = "both masks empty -> precision = recall = f1 = jaccard = 1; other undefined ratios -> 0"


class ConfusionCounts(ValidatedModel):
    """Pixel counts of one image"""
    tp: int = Field(ge=0, description="Foreground predicted as foreground")
    fp: int = Field(ge=0, description="Background predicted as foreground")
    fn: int = Field(ge=0, description="Foreground predicted as background")
    tn: int = Field(ge=0, description="Background predicted as background")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tp + other.tp, fp=self.fp + other.fp, fn=self.fn + other.fn, tn=self.tn + other.tn)


class MetricScores(ValidatedModel):
    accuracy: float = Field(ge=0, le=1)
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    jaccard: float = Field(ge=0, le=1)

    def scores(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


class MetricsRecord(MetricScores):
    """Metrics of one fold on the evaluation split"""
    per_image: List[ConfusionCounts] = Field(default_factory=list, description="Counts behind the scores")
    fold: int = Field(default=0, ge=0, description="Cross-validation fold")
    aggregation: Literal["macro", "micro"] = Field(default="macro", description="How per-image counts were combined")

    @model_validator(mode="after")
    def _check_harmonic_mean(self):
        # macro averages of f1 are not the harmonic mean of averaged precision/recall
        if self.aggregation == "micro" and self.precision + self.recall > 0:
            expected = 2 * self.precision * self.recall / (self.precision + self.recall)
            if abs(expected - self.f1) > 1e-9:
                raise OrganoidValidationError(f"f1 {self.f1} is not the harmonic mean of precision and recall")
        return self


class AggregateStat(ValidatedModel):
    best: float = Field(description="Highest fold score")
    mean: float = Field(description="Mean over folds")
    std: float = Field(ge=0, description="Sample standard deviation over folds (0 for a single fold)")
    folds: int = Field(ge=1, description="Folds aggregated")


def binarize(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where pred >= threshold"""
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def confusion(y: np.ndarray, y_hat: np.ndarray) -> ConfusionCounts:
    y, y_hat = np.asarray(y), np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionMismatch(f"mask shapes differ: {y.shape} vs {y_hat.shape}")
    truth, predicted = y.astype(bool), y_hat.astype(bool)
    tp = int(np.count_nonzero(truth & predicted))
    fp = int(np.count_nonzero(~truth & predicted))
    fn = int(np.count_nonzero(truth & ~predicted))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(truth.size) - tp - fp - fn)


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def metrics(counts: ConfusionCounts) -> MetricScores:
    if counts.n == 0:
        raise OrganoidValidationError("confusion counts of an empty image")
    if counts.tp + counts.fp + counts.fn == 0:
        return MetricScores(accuracy=1.0, precision=1.0, recall=1.0, f1=1.0, jaccard=1.0)
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricScores(
        accuracy=(counts.tp + counts.tn) / counts.n,
        precision=precision,
        recall=recall,
        f1=f1,
        jaccard=_ratio(counts.tp, counts.tp + counts.fp + counts.fn),
    )


def fold_metrics(
    per_image: Sequence[ConfusionCounts],
    fold: int = 0,
    aggregation: Literal["macro", "micro"] = "macro",
) -> MetricsRecord:
    """Macro: mean of per-image metrics. Micro: metrics of the pooled counts."""
    if not per_image:
        raise EmptyDataset("no images to score")
    if aggregation == "micro":
        pooled = per_image[0]
        for counts in per_image[1:]:
            pooled = pooled + counts
        scores = metrics(pooled).scores()
    else:
        table = np.array([list(metrics(counts).scores().values()) for counts in per_image], dtype=np.float64)
        scores = dict(zip(METRIC_NAMES, table.mean(axis=0).tolist()))
    return MetricsRecord(**scores, per_image=list(per_image), fold=fold, aggregation=aggregation)


def aggregate(records: Sequence[MetricScores]) -> Dict[str, AggregateStat]:
    """Best, mean and sample std of each metric across fold records"""
    if not records:
        raise EmptyDataset("no fold records to aggregate")
    stats = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(record, name) for record in records], dtype=np.float64)
        stats[name] = AggregateStat(
            best=float(values.max()),
            mean=float(values.mean()),
            std=float(values.std(ddof=1)) if len(values) > 1 else 0.0,
            folds=len(values),
        )
    return stats


def predict(model: UNet, images: Sequence[np.ndarray], batch_size: int = 16, device: str = "cpu") -> np.ndarray:
    """Foreground probabilities, shape (N, H, W)"""
    model = model.to(device).eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack([np.asarray(img, dtype=np.float32) for img in images[start:start + batch_size]])
            prediction = model(torch.from_numpy(batch)[:, None].to(device))
            outputs.append(prediction[:, 0].cpu().numpy())
    if not outputs:
        return np.zeros((0, model.spec.input_size, model.spec.input_size), dtype=np.float32)
    return np.concatenate(outputs).astype(np.float32)


def score_crops(
    model: UNet,
    crop_dir,
    infos: Sequence[CropInfo],
    threshold: float = 0.5,
    batch_size: int = 16,
    device: str = "cpu",
) -> List[ConfusionCounts]:
    counts = []
    for start in range(0, len(infos), batch_size):
        crops = [read_crop(crop_dir, info) for info in infos[start:start + batch_size]]
        predictions = predict(model, [crop.image for crop in crops], batch_size, device)
        counts.extend(confusion(crop.mask, binarize(pred, threshold)) for crop, pred in zip(crops, predictions))
    return counts


def evaluate_checkpoint(
    bundle: CheckpointBundle,
    infos: Sequence[CropInfo],
    crop_dir,
    fold: int = 0,
    threshold: float = 0.5,
    aggregation: Literal["macro", "micro"] = "macro",
    batch_size: int = 16,
    device: str = "cpu",
) -> MetricsRecord:
    """Score a main-task checkpoint on the given crops"""
    if bundle.meta.task != "main":
        raise OrganoidValidationError("only main-task checkpoints produce segmentations")
    if not infos:
        raise EmptyDataset("evaluation split is empty")
    model = model_from_checkpoint(bundle)
    record = fold_metrics(score_crops(model, crop_dir, infos, threshold, batch_size, device), fold, aggregation)
    logger.info(
        "Fold %d on %d crops: F1 %.4f, Jaccard %.4f (%s, threshold %.2f)",
        fold, len(infos), record.f1, record.jaccard, aggregation, threshold,
    )
    return record


def overlay_samples(
    bundle: CheckpointBundle,
    infos: Sequence[CropInfo],
    crop_dir,
    count: int,
    threshold: float = 0.5,
    device: str = "cpu",
) -> List[Tuple[str, np.ndarray, np.ndarray, np.ndarray]]:
    """(crop id, image, true mask, predicted mask) for the first `count` crops"""
    chosen = list(infos[:count])
    if not chosen:
        return []
    model = model_from_checkpoint(bundle)
    crops = [read_crop(crop_dir, info) for info in chosen]
    predictions = predict(model, [crop.image for crop in crops], device=device)
    return [
        (crop.crop_id, crop.image, crop.mask, binarize(pred, threshold))
        for crop, pred in zip(crops, predictions)
    ]


def conventions(threshold: float, aggregation: str, k_folds: Optional[int] = None) -> Dict[str, object]:
    """Scoring conventions recorded beside every report table"""
    notes = {
        "threshold": threshold,
        "threshold_rule": "pixel >= threshold is foreground",
        "aggregation": aggregation,
        "std": "sample (ddof=1); 0 for a single fold",
        "empty_rule": EMPTY_RULE,
        "folds_over": "main-task training set (label budget)",
    }
    if k_folds is not None:
        notes["k_folds"] = k_folds
    return notes
