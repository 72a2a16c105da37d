"""
Organoid Imaging
Stack loading, sliding-window tiling, resizing, rotation and synthetic organoid data
"""

import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageSequence, UnidentifiedImageError
from pydantic import ConfigDict, Field, computed_field, model_validator

from organoid_config import atomic_write_text
from organoid_errors import (
    CorruptRaster,
    InconsistentDimensions,
    MisalignedMasks,
    MissingFile,
    NonSquareCrop,
    OrganoidValidationError,
    WindowLargerThanImage,
    ValidatedModel,
)

logger = logging.getLogger(__name__)

RASTER_EXTENSIONS = (".png", ".tif", ".tiff")
ROTATIONS = (0, 90, 180, 270)
SLICE_PATTERN = re.compile(r"slice_(\d+)$")
CROP_ID_PATTERN = re.compile(r"^(?P<base>.+-s\d+-x\d+-y\d+)-r(?P<rot>\d{3})$")

# Maximum sample value per Pillow mode; "I" is how Pillow exposes 16-bit PNGs
MODE_MAX_VALUE = {"1": 1.0, "L": 255.0, "I;16": 65535.0, "I;16B": 65535.0, "I;16L": 65535.0, "I": 65535.0, "F": 1.0}


class RasterStack(ValidatedModel):
    """One microscopy stack: single-channel slices at different focal depths"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    source_id: str = Field(description="Identifier of the acquisition the slices came from")
    slices: List[np.ndarray] = Field(description="2-D float32 pixel grids in [0,1], one per slice")

    @model_validator(mode="after")
    def _check_slices(self):
        if not self.slices:
            raise OrganoidValidationError(f"stack '{self.source_id}' has no slices")
        shape = self.slices[0].shape
        for index, grid in enumerate(self.slices):
            if grid.ndim != 2 or min(grid.shape) == 0:
                raise OrganoidValidationError(f"slice {index} of '{self.source_id}' is not a 2-D image")
            if grid.shape != shape:
                raise InconsistentDimensions(
                    f"stack '{self.source_id}': slice {index} is {grid.shape[1]}x{grid.shape[0]}, "
                    f"expected {shape[1]}x{shape[0]}"
                )
            if grid.min() < 0.0 or grid.max() > 1.0:
                raise OrganoidValidationError(f"slice {index} of '{self.source_id}' leaves [0,1]")
        return self

    @property
    def width(self) -> int:
        return int(self.slices[0].shape[1])

    @property
    def height(self) -> int:
        return int(self.slices[0].shape[0])


class CropInfo(ValidatedModel):
    """Provenance of one crop; the pixels live in the crop store"""
    source_id: str = Field(description="Stack the window was cut from")
    slice_index: int = Field(description="Slice inside the stack")
    window_x: int = Field(description="Window origin x before resizing, in pixels")
    window_y: int = Field(description="Window origin y before resizing, in pixels")
    window_size: int = Field(default=636, description="Window edge length before resizing")
    rotation_deg: Literal[0, 90, 180, 270] = Field(default=0, description="Quarter-turn rotation applied")
    object_fraction: float = Field(description="Foreground share of the window mask at original resolution")

    @property
    def base_id(self) -> str:
        return f"{self.source_id}-s{self.slice_index:03d}-x{self.window_x:05d}-y{self.window_y:05d}"

    @computed_field
    @property
    def crop_id(self) -> str:
        return f"{self.base_id}-r{self.rotation_deg:03d}"

    def info(self) -> "CropInfo":
        return CropInfo(**self.model_dump(include=set(CropInfo.model_fields)))


class CropRecord(CropInfo):
    """An image/mask pair cut from a stack, with its provenance"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray = Field(description="float32 pixels in [0,1]")
    mask: np.ndarray = Field(description="uint8 pixels in {0,1}")

    @model_validator(mode="after")
    def _check_pair(self):
        if self.image.shape != self.mask.shape:
            raise OrganoidValidationError(
                f"crop {self.crop_id}: image {self.image.shape} and mask {self.mask.shape} differ"
            )
        if not 0.0 <= self.object_fraction <= 1.0:
            raise OrganoidValidationError(f"crop {self.crop_id}: object fraction {self.object_fraction}")
        return self


def parse_crop_id(crop_id: str) -> Tuple[str, int]:
    """Split a crop id into (base id, rotation in degrees)"""
    match = CROP_ID_PATTERN.match(crop_id)
    if not match:
        raise OrganoidValidationError(f"malformed crop id '{crop_id}'")
    return match.group("base"), int(match.group("rot"))


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

def _decode_frame(frame: Image.Image, origin: str) -> np.ndarray:
    if frame.mode not in MODE_MAX_VALUE:
        raise CorruptRaster(f"{origin}: mode {frame.mode} is not a single-channel raster")
    pixels = np.asarray(frame, dtype=np.float64)
    scaled = pixels / MODE_MAX_VALUE[frame.mode]
    if scaled.min() < 0.0 or scaled.max() > 1.0:
        raise CorruptRaster(f"{origin}: samples exceed the {frame.mode} range")
    return scaled.astype(np.float32)


def _slice_sort_key(path: Path):
    match = SLICE_PATTERN.search(path.stem)
    return (0, int(match.group(1)), path.name) if match else (1, 0, path.name)


def list_slice_files(directory: Path) -> List[Path]:
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in RASTER_EXTENSIONS and p.is_file()]
    return sorted(files, key=_slice_sort_key)


def load_stack(path, format: Literal["raster_dir", "stacked_raster"] = "raster_dir") -> RasterStack:
    """Load a stack from a directory of per-slice rasters or from one multi-page TIFF"""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such stack: {path}")

    slices = []
    if format == "raster_dir":
        if not path.is_dir():
            raise MissingFile(f"expected a directory of slices: {path}")
        files = list_slice_files(path)
        if not files:
            raise MissingFile(f"no raster slices found in {path}")
        for file in files:
            try:
                with Image.open(file) as image:
                    slices.append(_decode_frame(image, str(file)))
            except (UnidentifiedImageError, OSError) as e:
                raise CorruptRaster(f"{file}: {e}") from e
        source_id = path.name
    elif format == "stacked_raster":
        try:
            with Image.open(path) as image:
                for index, frame in enumerate(ImageSequence.Iterator(image)):
                    slices.append(_decode_frame(frame, f"{path}[{index}]"))
        except (UnidentifiedImageError, OSError) as e:
            raise CorruptRaster(f"{path}: {e}") from e
        source_id = path.stem
    else:
        raise OrganoidValidationError(f"unknown stack format '{format}'")

    stack = RasterStack(source_id=source_id, slices=slices)
    logger.debug("Loaded stack %s: %d slices of %dx%d", source_id, len(slices), stack.width, stack.height)
    return stack


def binarize_stack(stack: RasterStack) -> RasterStack:
    """Masks are stored as rasters; foreground is any sample at or above half range"""
    return RasterStack(
        source_id=stack.source_id,
        slices=[(grid >= 0.5).astype(np.float32) for grid in stack.slices],
    )


def load_stack_pair(
    stacks_dir,
    masks_dir,
    source_id: str,
    format: Literal["raster_dir", "stacked_raster"] = "raster_dir",
) -> Tuple[RasterStack, RasterStack]:
    """Load an image stack and its mirrored mask stack, matched by filename"""
    if format == "stacked_raster":
        image_path, mask_path = Path(stacks_dir) / f"{source_id}.tif", Path(masks_dir) / f"{source_id}.tif"
        if not mask_path.exists():
            raise MissingFile(f"no masks for stack '{source_id}' under {masks_dir}")
        return load_stack(image_path, format), binarize_stack(load_stack(mask_path, format))
    image_dir, mask_dir = Path(stacks_dir) / source_id, Path(masks_dir) / source_id
    if not mask_dir.is_dir():
        raise MissingFile(f"no masks for stack '{source_id}' under {masks_dir}")
    image_names = [p.name for p in list_slice_files(image_dir)] if image_dir.is_dir() else []
    mask_names = [p.name for p in list_slice_files(mask_dir)]
    if image_names != mask_names:
        raise MisalignedMasks(
            f"stack '{source_id}': image slices {image_names} do not match mask slices {mask_names}"
        )
    return load_stack(image_dir), binarize_stack(load_stack(mask_dir))


def write_stack(stack: RasterStack, directory, bit_depth: int = 8) -> List[Path]:
    """Write each slice as a lossless PNG named slice_<k>.png"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for index, grid in enumerate(stack.slices):
        if bit_depth == 8:
            image = Image.fromarray(np.rint(grid * 255.0).astype(np.uint8), mode="L")
        elif bit_depth == 16:
            image = Image.fromarray(np.rint(grid * 65535.0).astype(np.uint16))
        else:
            raise OrganoidValidationError(f"bit depth must be 8 or 16, got {bit_depth}")
        target = directory / f"slice_{index}.png"
        image.save(target)
        written.append(target)
    return written


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def window_origins(width: int, height: int, window: int = 636, stride: int = 60) -> List[Tuple[int, int]]:
    """Every full-window origin (x, y) on the stride grid; partial windows are never produced"""
    if window > min(width, height):
        raise WindowLargerThanImage(f"window {window} exceeds image {width}x{height}")
    if stride <= 0:
        raise OrganoidValidationError(f"stride must be positive, got {stride}")
    return [
        (x, y)
        for y in range(0, height - window + 1, stride)
        for x in range(0, width - window + 1, stride)
    ]


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling"""
    if out_w <= 0 or out_h <= 0:
        raise OrganoidValidationError(f"output size must be positive, got {out_w}x{out_h}")
    if img.shape == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    grid = torch.from_numpy(np.asarray(img, dtype=np.float64))[None, None]
    resized = F.interpolate(grid, size=(out_h, out_w), mode="bilinear", align_corners=True)
    return resized[0, 0].numpy().astype(np.float32)


def _nearest_index(size_in: int, size_out: int) -> np.ndarray:
    if size_out == 1:
        return np.zeros(1, dtype=np.int64)
    return np.rint(np.arange(size_out) * (size_in - 1) / (size_out - 1)).astype(np.int64)


def resize_mask_nearest(mask: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbour resize with corner-aligned sampling, re-binarized at 0.5"""
    if out_w <= 0 or out_h <= 0:
        raise OrganoidValidationError(f"output size must be positive, got {out_w}x{out_h}")
    rows = _nearest_index(mask.shape[0], out_h)
    cols = _nearest_index(mask.shape[1], out_w)
    return (np.asarray(mask)[np.ix_(rows, cols)] >= 0.5).astype(np.uint8)


def rotate_crop(crop: CropRecord, degrees: int) -> CropRecord:
    """Exact counter-clockwise quarter-turn rotation of image and mask"""
    if degrees % 90:
        raise OrganoidValidationError(f"rotation must be a multiple of 90, got {degrees}")
    if crop.image.shape[0] != crop.image.shape[1]:
        raise NonSquareCrop(f"crop {crop.crop_id} is {crop.image.shape[1]}x{crop.image.shape[0]}")
    turns = (degrees // 90) % 4
    # rot90 returns views; the base pixels are shared, never written
    return crop.model_copy(update={
        "image": np.rot90(crop.image, turns),
        "mask": np.rot90(crop.mask, turns),
        "rotation_deg": (crop.rotation_deg + 90 * turns) % 360,
    })


def rotate_enrich(crops: Sequence[CropRecord]) -> List[CropRecord]:
    """Each crop followed by its 90, 180 and 270 degree rotations"""
    for crop in crops:
        if crop.image.shape[0] != crop.image.shape[1]:
            raise NonSquareCrop(f"crop {crop.crop_id} is {crop.image.shape[1]}x{crop.image.shape[0]}")
    enriched = []
    for crop in crops:
        enriched.append(crop)
        enriched.extend(rotate_crop(crop, degrees) for degrees in ROTATIONS[1:])
    return enriched


def _window_sums(mask: np.ndarray, origins: Sequence[Tuple[int, int]], window: int) -> np.ndarray:
    integral = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    xs = np.array([o[0] for o in origins], dtype=np.int64)
    ys = np.array([o[1] for o in origins], dtype=np.int64)
    return (
        integral[ys + window, xs + window] - integral[ys, xs + window]
        - integral[ys + window, xs] + integral[ys, xs]
    )


def tile_stack(
    stack: RasterStack,
    masks: RasterStack,
    window: int = 636,
    stride: int = 60,
    resize_to: int = 320,
    min_object_fraction: float = 0.05,
) -> List[CropRecord]:
    """Cut every full window, drop the ones with too little foreground, resize the rest"""
    if len(masks.slices) != len(stack.slices) or (masks.width, masks.height) != (stack.width, stack.height):
        raise MisalignedMasks(
            f"stack '{stack.source_id}' has {len(stack.slices)} slices of {stack.width}x{stack.height}, "
            f"masks have {len(masks.slices)} of {masks.width}x{masks.height}"
        )
    origins = window_origins(stack.width, stack.height, window, stride)
    area = float(window * window)

    crops = []
    for slice_index, (grid, mask) in enumerate(zip(stack.slices, masks.slices)):
        binary = (mask >= 0.5).astype(np.uint8)
        fractions = _window_sums(binary, origins, window) / area
        for (x, y), fraction in zip(origins, fractions):
            if fraction < min_object_fraction:
                continue
            crops.append(CropRecord(
                source_id=stack.source_id,
                slice_index=slice_index,
                window_x=x,
                window_y=y,
                window_size=window,
                rotation_deg=0,
                object_fraction=float(fraction),
                image=resize_bilinear(grid[y:y + window, x:x + window], resize_to, resize_to),
                mask=resize_mask_nearest(binary[y:y + window, x:x + window], resize_to, resize_to),
            ))
    logger.info(
        "Tiled %s: %d of %d windows kept (min object fraction %.2f)",
        stack.source_id, len(crops), len(origins) * len(stack.slices), min_object_fraction,
    )
    return crops


# ---------------------------------------------------------------------------
# Crop store
# ---------------------------------------------------------------------------

def write_crop_store(crops: Sequence[CropRecord], directory) -> List[CropInfo]:
    """Persist each base window once; rotations are re-derived on read"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stored = set()
    for crop in crops:
        if crop.base_id in stored:
            continue
        base = rotate_crop(crop, (360 - crop.rotation_deg) % 360) if crop.rotation_deg else crop
        np.savez_compressed(
            directory / f"{base.base_id}.npz",
            image=np.ascontiguousarray(base.image),
            mask=np.ascontiguousarray(base.mask),
        )
        stored.add(crop.base_id)
    return [crop.info() for crop in crops]


def write_crop_index(infos: Sequence[CropInfo], directory) -> Path:
    index_path = Path(directory) / "index.json"
    atomic_write_text(index_path, json.dumps([info.model_dump() for info in infos], indent=1, sort_keys=True))
    logger.info("Crop index %s: %d crops", index_path, len(infos))
    return index_path


def read_crop_index(directory) -> List[CropInfo]:
    index_path = Path(directory) / "index.json"
    if not index_path.exists():
        raise MissingFile(f"no crop index at {index_path}; run 'prepare' first")
    return [CropInfo(**entry) for entry in json.loads(index_path.read_text(encoding="utf-8"))]


def read_crop(directory, info: CropInfo) -> CropRecord:
    """Load a crop's base window and apply its rotation"""
    archive = Path(directory) / f"{info.base_id}.npz"
    if not archive.exists():
        raise MissingFile(f"crop archive missing: {archive}")
    with np.load(archive) as data:
        base = CropRecord(**info.model_dump(exclude={"rotation_deg"}), rotation_deg=0,
                          image=data["image"], mask=data["mask"])
    if not info.rotation_deg:
        return base
    rotated = rotate_crop(base, info.rotation_deg)
    return rotated.model_copy(update={
        "image": np.ascontiguousarray(rotated.image),
        "mask": np.ascontiguousarray(rotated.mask),
    })


# ---------------------------------------------------------------------------
# Synthetic organoids
# ---------------------------------------------------------------------------

def _draw_organoids(rng: np.random.Generator, width: int, height: int, count: int):
    """Filled-ellipse mask plus the blob geometry used to shade every slice"""
    mask = np.zeros((height, width), dtype=np.uint8)
    short_side = min(width, height)
    blobs = []
    for _ in range(count):
        axes = rng.uniform(0.03, 0.09, size=2) * short_side
        margin = int(np.ceil(axes.max())) + 1
        center = (
            int(rng.integers(margin, max(margin + 1, width - margin))),
            int(rng.integers(margin, max(margin + 1, height - margin))),
        )
        axes = (max(1, int(round(axes[0]))), max(1, int(round(axes[1]))))
        angle = float(rng.uniform(0.0, 180.0))
        ring = bool(rng.random() < 0.5)
        brightness = float(rng.uniform(0.55, 0.8))
        cv2.ellipse(mask, center, axes, angle, 0, 360, 1, thickness=-1)
        blobs.append((center, axes, angle, ring, brightness))
    return mask, blobs


def _shade_slice(rng, width, height, blobs, depth_blur: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    tilt = rng.uniform(-0.05, 0.05, size=2)
    canvas = 0.22 + tilt[0] * xx / width + tilt[1] * yy / height
    canvas = canvas.astype(np.float32)
    for center, axes, angle, ring, brightness in blobs:
        cv2.ellipse(canvas, center, axes, angle, 0, 360, brightness, thickness=-1)
        if ring:
            wall = max(1, int(round(0.25 * min(axes))))
            lumen = (max(1, axes[0] - wall), max(1, axes[1] - wall))
            cv2.ellipse(canvas, center, lumen, angle, 0, 360, brightness * 0.6, thickness=-1)
    canvas = cv2.GaussianBlur(canvas, (0, 0), sigmaX=depth_blur)
    canvas += rng.normal(0.0, 0.03, size=canvas.shape).astype(np.float32)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def synthesize_dataset(
    n_stacks: int,
    slice_size: Tuple[int, int] = (640, 640),
    blob_count_range: Tuple[int, int] = (3, 12),
    seed: int = 26,
    n_slices: int = 4,
) -> Tuple[List[RasterStack], List[RasterStack]]:
    """Artificial organoid stacks with exact masks; identical output for identical seeds"""
    if n_stacks <= 0:
        raise OrganoidValidationError(f"n_stacks must be positive, got {n_stacks}")
    low, high = blob_count_range
    if low < 0 or high < low:
        raise OrganoidValidationError(f"invalid blob count range {blob_count_range}")
    width, height = slice_size
    rng = np.random.default_rng(seed)

    stacks, masks = [], []
    for stack_index in range(n_stacks):
        source_id = f"synth_{stack_index:03d}"
        mask, blobs = _draw_organoids(rng, width, height, int(rng.integers(low, high + 1)))
        # focal depth: the middle slices are the sharpest
        centre = (n_slices - 1) / 2.0
        images = [
            _shade_slice(rng, width, height, blobs, depth_blur=1.0 + 0.8 * abs(k - centre))
            for k in range(n_slices)
        ]
        stacks.append(RasterStack(source_id=source_id, slices=images))
        masks.append(RasterStack(source_id=source_id, slices=[mask.astype(np.float32)] * n_slices))
    return stacks, masks


def synthesize_to_disk(
    out_dir,
    n_stacks: int,
    slice_size: Tuple[int, int] = (640, 640),
    blob_count_range: Tuple[int, int] = (3, 12),
    seed: int = 26,
    n_slices: int = 4,
) -> Dict[str, int]:
    """Write the synthetic dataset as stacks/<source_id>/slice_<k>.png with mirrored masks/"""
    out_dir = Path(out_dir)
    stacks, masks = synthesize_dataset(n_stacks, slice_size, blob_count_range, seed, n_slices)
    for stack, mask in zip(stacks, masks):
        write_stack(stack, out_dir / "stacks" / stack.source_id)
        write_stack(mask, out_dir / "masks" / mask.source_id)
    logger.info("Synthesized %d stacks of %d slices into %s", n_stacks, n_slices, out_dir)
    return {"stacks": n_stacks, "slices": n_stacks * n_slices}


def list_sources(stacks_dir, format: Literal["raster_dir", "stacked_raster"] = "raster_dir") -> List[str]:
    stacks_dir = Path(stacks_dir)
    if not stacks_dir.is_dir():
        raise MissingFile(f"no stacks directory at {stacks_dir}")
    if format == "stacked_raster":
        return sorted(p.stem for p in stacks_dir.glob("*.tif"))
    return sorted(p.name for p in stacks_dir.iterdir() if p.is_dir())


def prepare_crops(
    data_dir,
    crop_dir,
    window: int = 636,
    stride: int = 60,
    resize_to: int = 320,
    min_object_fraction: float = 0.05,
    sources: Optional[Sequence[str]] = None,
    format: Literal["raster_dir", "stacked_raster"] = "raster_dir",
) -> List[CropInfo]:
    """Tile every stack under data_dir/stacks, enrich with rotations, persist to crop_dir"""
    data_dir = Path(data_dir)
    infos: List[CropInfo] = []
    # one source at a time keeps peak memory at a single stack's windows
    for source_id in sources or list_sources(data_dir / "stacks", format):
        stack, masks = load_stack_pair(data_dir / "stacks", data_dir / "masks", source_id, format)
        crops = rotate_enrich(tile_stack(stack, masks, window, stride, resize_to, min_object_fraction))
        infos.extend(write_crop_store(crops, crop_dir))
    if not infos:
        logger.warning("No window reached the %.2f object fraction; the crop store is empty", min_object_fraction)
    write_crop_index(infos, crop_dir)
    return infos
