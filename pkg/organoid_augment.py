"""
Organoid Pretext Corruptions
The three operators the restoration network learns to invert: pixel drop, half-resolution blur, Sobel edges
"""

import hashlib
import logging
import math
from typing import Literal, Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import Field, model_validator

from organoid_errors import FractionOutOfRange, ImageTooSmall, OddDimensions, OrganoidValidationError, ValidatedModel
from organoid_imaging import resize_bilinear

logger = logging.getLogger(__name__)

STANDARD_DROP_FRACTIONS = (0.25, 0.50, 0.75)
STANDARD_AUGMENTATIONS = ("pixel-drop:0.25", "pixel-drop:0.5", "pixel-drop:0.75", "blur", "sobel")
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
SOBEL_MAX_MAGNITUDE = 4.0 * math.sqrt(2.0)


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def _correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D correlation with reflect padding; output has the input's shape"""
    pad = kernel.shape[0] // 2
    padded = np.pad(np.asarray(img, dtype=np.float64), pad, mode="reflect")
    response = F.conv2d(
        torch.from_numpy(padded)[None, None],
        torch.from_numpy(np.ascontiguousarray(kernel, dtype=np.float64))[None, None],
    )
    return response[0, 0].numpy()


def drop_count(fraction: float, n_pixels: int) -> int:
    """round(fraction * n) with halves rounded up"""
    return int(math.floor(fraction * n_pixels + 0.5))


def pixel_drop(img: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Zero exactly round(fraction * W * H) distinct pixels chosen uniformly without replacement"""
    if not 0.0 < fraction < 1.0:
        raise FractionOutOfRange(f"drop fraction must lie in (0,1), got {fraction}")
    out = np.array(img, dtype=np.float32, copy=True)
    rng = np.random.default_rng(seed)
    positions = rng.choice(out.size, size=drop_count(fraction, out.size), replace=False)
    out.reshape(-1)[positions] = 0.0
    return out


def gaussian_blur_halfres(img: np.ndarray) -> np.ndarray:
    """5x5 Gaussian (sigma 1), bilinear downscale by two, bilinear upscale back"""
    height, width = img.shape
    if height % 2 or width % 2:
        raise OddDimensions(f"half-resolution blur needs even dimensions, got {width}x{height}")
    smoothed = _correlate(img, gaussian_kernel(5, 1.0))
    half = resize_bilinear(smoothed, width // 2, height // 2)
    restored = resize_bilinear(half, width, height)
    return np.clip(restored, 0.0, 1.0).astype(np.float32)


def sobel_filter(img: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude scaled by its analytic bound for [0,1] inputs"""
    height, width = img.shape
    if height < 3 or width < 3:
        raise ImageTooSmall(f"Sobel needs at least 3x3 pixels, got {width}x{height}")
    gx = _correlate(img, SOBEL_X)
    gy = _correlate(img, SOBEL_Y)
    magnitude = np.sqrt(gx ** 2 + gy ** 2) / SOBEL_MAX_MAGNITUDE
    return np.clip(magnitude, 0.0, 1.0).astype(np.float32)


def derive_seed(base_seed: int, epoch: Optional[int], crop_id: str) -> int:
    """Stable per-(epoch, crop) seed; epoch None gives a fixed corruption per crop"""
    token = f"{base_seed}:{'fixed' if epoch is None else epoch}:{crop_id}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(token).digest()[:8], "little") >> 1


class AugmentationSpec(ValidatedModel):
    """Pretext corruption selected for a run"""
    kind: Literal["pixel_drop", "gaussian_blur", "sobel"] = Field(description="Corruption operator")
    drop_fraction: Optional[float] = Field(default=None, description="Share of pixels zeroed (pixel_drop only)")
    seed: int = Field(default=26, description="Base seed for the corruption RNG")

    @model_validator(mode="after")
    def _check_fraction(self):
        if self.kind == "pixel_drop":
            if self.drop_fraction is None or not 0.0 < self.drop_fraction < 1.0:
                raise FractionOutOfRange(f"pixel drop needs a fraction in (0,1), got {self.drop_fraction}")
        elif self.drop_fraction is not None:
            raise OrganoidValidationError(f"drop_fraction only applies to pixel_drop, not {self.kind}")
        return self

    @classmethod
    def parse(cls, text: str, seed: int = 26) -> "AugmentationSpec":
        """Accepts the run-config strings: pixel-drop:<f>, blur, sobel"""
        text = text.strip().lower()
        if text.startswith("pixel-drop:"):
            try:
                fraction = float(text.split(":", 1)[1])
            except ValueError as e:
                raise OrganoidValidationError(f"bad pixel-drop fraction in '{text}'") from e
            return cls(kind="pixel_drop", drop_fraction=fraction, seed=seed)
        if text == "blur":
            return cls(kind="gaussian_blur", seed=seed)
        if text == "sobel":
            return cls(kind="sobel", seed=seed)
        raise OrganoidValidationError(f"unknown augmentation '{text}'; expected pixel-drop:<f>, blur or sobel")

    @property
    def label(self) -> str:
        if self.kind == "pixel_drop":
            return f"pixel-drop:{self.drop_fraction:g}"
        return "blur" if self.kind == "gaussian_blur" else "sobel"

    @property
    def is_standard_setting(self) -> bool:
        return self.kind != "pixel_drop" or self.drop_fraction in STANDARD_DROP_FRACTIONS

    def apply(self, img: np.ndarray, seed: Optional[int] = None) -> np.ndarray:
        if self.kind == "pixel_drop":
            return pixel_drop(img, self.drop_fraction, self.seed if seed is None else seed)
        if self.kind == "gaussian_blur":
            return gaussian_blur_halfres(img)
        return sobel_filter(img)
