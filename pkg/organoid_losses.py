"""
Organoid Losses
Pretext losses (SSIM, SSIM-L1) and main-task losses (BCE, Dice, IoU) as differentiable torch objectives
"""

import functools
import logging
from typing import Callable, Dict, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import Field, model_validator

from organoid_errors import DimensionMismatch, OrganoidValidationError, ValidatedModel

logger = logging.getLogger(__name__)

TensorLike = Union[torch.Tensor, np.ndarray]
BCE_CLAMP = 1e-7


class SsimConfig(ValidatedModel):
    """SSIM stabilisers and window geometry"""
    c1: float = Field(default=0.01, gt=0, description="Luminance stabiliser, used literally")
    c2: float = Field(default=0.03, gt=0, description="Contrast/structure stabiliser, used literally")
    window_size: int = Field(default=11, description="Edge of the uniform N x N window (odd)")
    window_stride: int = Field(default=1, ge=1, description="Step between window positions")

    @model_validator(mode="after")
    def _check_window(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise OrganoidValidationError(f"SSIM window must be odd and >= 3, got {self.window_size}")
        return self


class SmoothingConfig(ValidatedModel):
    """Smoothing term of the Dice and IoU losses"""
    epsilon: float = Field(default=0.0001, gt=0, description="Added to the denominator")


class WindowStats(ValidatedModel):
    """First and second moments of one pair of SSIM windows"""
    mu_x: float = Field(description="Mean of the x window")
    mu_y: float = Field(description="Mean of the y window")
    var_x: float = Field(ge=0, description="Population variance of the x window")
    var_y: float = Field(ge=0, description="Population variance of the y window")
    cov_xy: float = Field(description="Covariance of the two windows")

    @model_validator(mode="after")
    def _check_cauchy_schwarz(self):
        if abs(self.cov_xy) > (self.var_x * self.var_y) ** 0.5 + 1e-9:
            raise OrganoidValidationError(f"covariance {self.cov_xy} exceeds the variance bound")
        return self


def _as_tensor(value: TensorLike) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def _pair(y: TensorLike, y_hat: TensorLike):
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionMismatch(f"shapes differ: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.dtype != y_hat.dtype:
        y = y.to(y_hat.dtype)
    return y, y_hat


def _per_sample(t: torch.Tensor) -> torch.Tensor:
    """(B,C,H,W) reduces per batch element; any other rank is one sample"""
    return t.flatten(1) if t.dim() == 4 else t.reshape(1, -1)


def _as_image_batch(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:
        return t[None, None]
    if t.dim() == 3:
        return t[:, None]
    if t.dim() == 4:
        return t
    raise DimensionMismatch(f"SSIM needs (H,W), (B,H,W) or (B,C,H,W), got {tuple(t.shape)}")


def effective_window(cfg: SsimConfig, height: int, width: int) -> int:
    """The configured window, shrunk to the largest odd size that fits small images"""
    window = min(cfg.window_size, height, width)
    if window % 2 == 0:
        window -= 1
    if window != cfg.window_size:
        logger.debug("SSIM window shrunk from %d to %d for %dx%d input", cfg.window_size, window, width, height)
    return max(window, 1)


def ssim_map(x: TensorLike, y: TensorLike, cfg: SsimConfig = None) -> torch.Tensor:
    """Per-window SSIM with uniform weights, shape (B, C, H', W')"""
    cfg = cfg or SsimConfig()
    x, y = _pair(x, y)
    x, y = _as_image_batch(x), _as_image_batch(y)
    window = effective_window(cfg, x.shape[-2], x.shape[-1])
    pool = functools.partial(F.avg_pool2d, kernel_size=window, stride=cfg.window_stride)

    mu_x, mu_y = pool(x), pool(y)
    var_x = pool(x * x) - mu_x * mu_x
    var_y = pool(y * y) - mu_y * mu_y
    cov_xy = pool(x * y) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + cfg.c1) * (2 * cov_xy + cfg.c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + cfg.c1) * (var_x + var_y + cfg.c2)
    return numerator / denominator


def ssim(x: TensorLike, y: TensorLike, cfg: SsimConfig = None) -> torch.Tensor:
    """Mean SSIM over all window positions, averaged over the batch"""
    return ssim_map(x, y, cfg).flatten(1).mean(dim=1).mean()


def window_stats(x: np.ndarray, y: np.ndarray) -> WindowStats:
    """Moments of a single window pair, computed directly"""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return WindowStats(
        mu_x=float(x.mean()),
        mu_y=float(y.mean()),
        var_x=float(x.var()),
        var_y=float(y.var()),
        cov_xy=float(((x - x.mean()) * (y - y.mean())).mean()),
    )


def loss_ssim(x: TensorLike, y: TensorLike, cfg: SsimConfig = None) -> torch.Tensor:
    return 1.0 - ssim(x, y, cfg)


@functools.lru_cache(maxsize=None)
def _note_mae_convention() -> None:
    logger.info("L1 term uses the plain mean absolute error, not the printed '1 - MAE' form")


def loss_mae(y: TensorLike, y_hat: TensorLike) -> torch.Tensor:
    """Mean absolute error per sample, averaged over the batch"""
    y, y_hat = _pair(y, y_hat)
    return _per_sample((y - y_hat).abs()).mean(dim=1).mean()


def loss_ssim_l1(x: TensorLike, y: TensorLike, cfg: SsimConfig = None) -> torch.Tensor:
    _note_mae_convention()
    return 0.5 * loss_mae(x, y) + 0.5 * loss_ssim(x, y, cfg)


def loss_bce(y: TensorLike, y_hat: TensorLike) -> torch.Tensor:
    """Binary cross entropy, natural log, predictions clamped away from 0 and 1"""
    y, y_hat = _pair(y, y_hat)
    p = y_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)
    return -_per_sample(terms).mean(dim=1).mean()


def loss_dice(y: TensorLike, y_hat: TensorLike, cfg: SmoothingConfig = None) -> torch.Tensor:
    cfg = cfg or SmoothingConfig()
    y, y_hat = _pair(y, y_hat)
    y, y_hat = _per_sample(y), _per_sample(y_hat)
    overlap = (y * y_hat).sum(dim=1)
    return (1.0 - 2.0 * overlap / ((y * y).sum(dim=1) + (y_hat * y_hat).sum(dim=1) + cfg.epsilon)).mean()


def loss_iou(y: TensorLike, y_hat: TensorLike, cfg: SmoothingConfig = None) -> torch.Tensor:
    cfg = cfg or SmoothingConfig()
    y, y_hat = _pair(y, y_hat)
    y, y_hat = _per_sample(y), _per_sample(y_hat)
    intersection = (y * y_hat).sum(dim=1)
    union = (y + y_hat).sum(dim=1) - intersection
    return (1.0 - intersection / (union + cfg.epsilon)).mean()


LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

PRETEXT_LOSSES = ("ssim", "ssim-l1")
MAIN_LOSSES = ("bce", "dice", "iou")


def build_loss(name: str, ssim_cfg: SsimConfig = None, smoothing: SmoothingConfig = None) -> LossFn:
    """Loss by run-config name, called as fn(target, prediction)"""
    ssim_cfg = ssim_cfg or SsimConfig()
    smoothing = smoothing or SmoothingConfig()
    losses: Dict[str, LossFn] = {
        "ssim": lambda target, prediction: loss_ssim(target, prediction, ssim_cfg),
        "ssim-l1": lambda target, prediction: loss_ssim_l1(target, prediction, ssim_cfg),
        "bce": loss_bce,
        "dice": lambda target, prediction: loss_dice(target, prediction, smoothing),
        "iou": lambda target, prediction: loss_iou(target, prediction, smoothing),
    }
    if name not in losses:
        raise OrganoidValidationError(f"unknown loss '{name}'; expected one of {sorted(losses)}")
    return losses[name]
