"""Raster images and instance masks: representation, I/O, and geometry.

Images are float arrays in [0, 1] shaped (H, W, C) with C in {1, 3}; masks
are (H, W) integer label maps where 0 is background and every positive id
is one cell instance. File I/O targets the 8/16-bit PNG and TIFF rasters
common in microscopy tooling: masks round-trip exactly, images within one
quantization step of the written bit depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

from .errors import ImageDecodeError, UnsupportedFormatError

__all__ = [
    "Image",
    "InstanceMask",
    "InstanceStats",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "rescale_image",
    "resize_to",
    "connected_components",
    "instance_stats",
]

# 16-bit grayscale shows up as any of these PIL modes depending on container.
_SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I;16N")


@dataclass
class Image:
    """A 2D raster with float values in [0, 1], shaped (H, W, C), C in {1, 3}.

    A bare (H, W) array is accepted and stored with an explicit single
    channel. Values are validated on construction: finite and inside [0, 1].
    """

    pixels: np.ndarray
    path: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(
                f"expected (H, W) or (H, W, C) with C in {{1, 3}}, got shape {arr.shape}"
            )
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must have positive height and width, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values must lie in [0, 1], found range [{lo}, {hi}]")
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class InstanceMask:
    """Integer label map: 0 is background, each positive id one instance.

    Label ids need not be contiguous and are never renumbered by I/O.
    """

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"mask labels must be integers, got dtype {arr.dtype}")
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("mask must have positive height and width")
        if arr.min() < 0:
            raise ValueError("mask labels must be non-negative")
        self.labels = arr.astype(np.int32, copy=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def labels_present(self) -> np.ndarray:
        """Sorted array of the positive labels that actually occur."""
        present = np.unique(self.labels)
        return present[present > 0]

    @property
    def n_instances(self) -> int:
        return int(self.labels_present().size)


@dataclass
class InstanceStats:
    """Per-instance shape statistics derived from a label map."""

    label: int
    area: int
    equivalent_diameter: float
    centroid: tuple[float, float]  # (row, col)


def load_image(path) -> Image:
    """Load an 8- or 16-bit PNG/TIFF raster, scaled to [0, 1] by its bit depth.

    Grayscale stays single-channel; palette and RGBA inputs are flattened to
    RGB. Raises FileNotFoundError for missing files, ImageDecodeError for
    unreadable ones, and UnsupportedFormatError for modes outside 8/16-bit
    integer rasters (e.g. float TIFF).
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such image file: {p}")
    try:
        im = PILImage.open(p)
        im.load()
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"cannot decode raster {p}: {exc}") from exc
    if im.mode in ("P", "RGBA"):
        im = im.convert("RGB")
    if im.mode == "L":
        arr = np.asarray(im, dtype=np.float32) / 255.0
    elif im.mode == "RGB":
        arr = np.asarray(im, dtype=np.float32) / 255.0
    elif im.mode in _SIXTEEN_BIT_MODES:
        arr = np.asarray(im, dtype=np.float32) / 65535.0
    elif im.mode == "I":
        raw = np.asarray(im, dtype=np.int64)
        if raw.min() < 0 or raw.max() > 65535:
            raise UnsupportedFormatError(
                f"integer raster {p} exceeds 16-bit range ({raw.min()}..{raw.max()})"
            )
        arr = raw.astype(np.float32) / 65535.0
    else:
        raise UnsupportedFormatError(f"unsupported raster mode {im.mode!r} in {p}")
    return Image(arr, path=str(p))


def save_image(image: Image, path, bit_depth: int = 8) -> None:
    """Write an Image as an 8- or 16-bit raster (format from the extension).

    Round trip via load_image is exact up to one quantization step,
    1 / (2**bit_depth - 1) per pixel. 16-bit color is not supported by the
    PNG/TIFF writers used here; color images must be written at 8 bits.
    """
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if bit_depth == 16 and image.channels == 3:
        raise UnsupportedFormatError("16-bit color output is not supported; use bit_depth=8")
    maxval = (1 << bit_depth) - 1
    quantized = np.round(image.pixels.astype(np.float64) * maxval)
    if bit_depth == 8:
        arr = quantized.astype(np.uint8)
    else:
        arr = quantized.astype(np.uint16)
    if image.channels == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path)


def load_mask(path) -> InstanceMask:
    """Load an integer label raster. Labels are preserved verbatim."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such mask file: {p}")
    try:
        im = PILImage.open(p)
        im.load()
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"cannot decode mask {p}: {exc}") from exc
    if im.mode == "F":
        raise UnsupportedFormatError(f"mask {p} has non-integer pixel values (float raster)")
    if im.mode not in ("L",) + _SIXTEEN_BIT_MODES and im.mode != "I":
        raise UnsupportedFormatError(
            f"mask {p} must be a single-channel label image, got mode {im.mode!r}"
        )
    arr = np.asarray(im).astype(np.int32)
    return InstanceMask(arr)


def save_mask(mask: InstanceMask, path) -> None:
    """Write a label map as a 16-bit single-channel raster, labels verbatim."""
    if mask.labels.max(initial=0) > 65535:
        raise UnsupportedFormatError("mask labels exceed the 16-bit range of the mask format")
    PILImage.fromarray(mask.labels.astype(np.uint16)).save(path)


_INTERPOLATIONS = {"nearest": cv2.INTER_NEAREST, "bilinear": cv2.INTER_LINEAR}


def rescale_image(image: Image, factor: float, interpolation: str = "bilinear") -> Image:
    """Rescale by a positive factor; output dims are round(H*f) x round(W*f).

    Bilinear is for intensity images; nearest is reserved for label-like
    content where interpolation would invent values.
    """
    if not factor > 0:
        raise ValueError(f"rescale factor must be positive, got {factor}")
    if interpolation not in _INTERPOLATIONS:
        raise ValueError(f"interpolation must be one of {sorted(_INTERPOLATIONS)}")
    if factor == 1.0:
        return Image(image.pixels.copy(), path=image.path)
    out_h = int(round(image.height * factor))
    out_w = int(round(image.width * factor))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"factor {factor} collapses {image.height}x{image.width} to zero size")
    return resize_to(image, (out_h, out_w), interpolation=interpolation)


def resize_to(image: Image, size: tuple[int, int], interpolation: str = "bilinear") -> Image:
    """Resample to exact (H, W) output dims."""
    if interpolation not in _INTERPOLATIONS:
        raise ValueError(f"interpolation must be one of {sorted(_INTERPOLATIONS)}")
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {size}")
    if (out_h, out_w) == (image.height, image.width):
        return Image(image.pixels.copy(), path=image.path)
    out = cv2.resize(image.pixels, (out_w, out_h), interpolation=_INTERPOLATIONS[interpolation])
    if out.ndim == 2:
        out = out[:, :, None]
    np.clip(out, 0.0, 1.0, out=out)
    return Image(out, path=image.path)


def connected_components(binary: np.ndarray, connectivity: int = 8) -> InstanceMask:
    """Label maximal connected foreground regions, background stays 0."""
    arr = np.asarray(binary, dtype=bool)
    if arr.ndim != 2:
        raise ValueError(f"binary input must be 2D, got shape {arr.shape}")
    if connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=int)
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, _ = ndimage.label(arr, structure=structure)
    return InstanceMask(labels.astype(np.int32))


def instance_stats(mask: InstanceMask) -> list[InstanceStats]:
    """Area, equivalent diameter, and centroid for every instance.

    The equivalent diameter is 2*sqrt(area/pi), the diameter of the disk
    with the same pixel area. Empty masks yield an empty list.
    """
    present = mask.labels_present()
    if present.size == 0:
        return []
    flat = mask.labels.ravel()
    counts = np.bincount(flat)
    rows, cols = np.indices(mask.shape)
    row_sums = np.bincount(flat, weights=rows.ravel().astype(np.float64))
    col_sums = np.bincount(flat, weights=cols.ravel().astype(np.float64))
    stats = []
    for label in present:
        area = int(counts[label])
        stats.append(
            InstanceStats(
                label=int(label),
                area=area,
                equivalent_diameter=2.0 * math.sqrt(area / math.pi),
                centroid=(row_sums[label] / area, col_sums[label] / area),
            )
        )
    return stats
