"""Cell-size estimation and geometric preparation of target images.

Style transfer between datasets with very different cell scales is weak
because cross-image patches stop corresponding. The fix: estimate the mean
cell length on each side (ground-truth masks for the source, a pluggable
detector for the unannotated target), form the ratio, and rescale target
images by it before their appearance is extracted, so target cells appear
at source scale.

"Cell length" here is the equivalent diameter 2*sqrt(area/pi): rotation
invariant and robust to irregular outlines.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DetectorError, NoCellsError
from .imaging import (
    Image,
    InstanceMask,
    connected_components,
    instance_stats,
    load_mask,
    rescale_image,
    save_image,
)

__all__ = [
    "SizeRatio",
    "NaiveDetector",
    "ExternalCommandDetector",
    "detector_from_id",
    "otsu_threshold",
    "naive_detector",
    "average_cell_length",
    "compute_size_ratio",
    "prepare_target",
]

# Rec. 601 luma weights for collapsing color input before thresholding.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class SizeRatio:
    """Mean source cell length over mean target cell length."""

    r: float
    mean_len_src: float
    mean_len_tgt: float
    n_src_instances: int
    n_tgt_instances: int

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "mean_len_src": self.mean_len_src,
            "mean_len_tgt": self.mean_len_tgt,
            "n_src_instances": self.n_src_instances,
            "n_tgt_instances": self.n_tgt_instances,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SizeRatio":
        return cls(
            r=float(d["r"]),
            mean_len_src=float(d["mean_len_src"]),
            mean_len_tgt=float(d["mean_len_tgt"]),
            n_src_instances=int(d["n_src_instances"]),
            n_tgt_instances=int(d["n_tgt_instances"]),
        )


def otsu_threshold(values: np.ndarray, nbins: int = 256) -> float:
    """Threshold maximizing between-class variance over a fixed histogram.

    Returns a value such that `pixel > threshold` selects the bright class.
    For a constant input the threshold equals that constant, selecting
    nothing.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        return lo
    hist, edges = np.histogram(flat, bins=nbins, range=(lo, hi))
    hist = hist.astype(np.float64)
    total = hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * centers)
    mu0 = np.where(w0 > 0, sum0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, (sum0[-1] - sum0) / np.maximum(w1, 1), 0.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # Exclude the last cut (everything in class 0).
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def _to_luminance(image: Image) -> np.ndarray:
    if image.channels == 1:
        return image.pixels[:, :, 0].astype(np.float64)
    return image.pixels.astype(np.float64) @ _LUMA


def naive_detector(image: Image, threshold="otsu") -> InstanceMask:
    """Global threshold plus 8-connected components.

    threshold is "otsu" or a fixed float in [0, 1). Border-touching
    instances are kept. A stand-in for a real pretrained detector, which
    plugs in through the Detector callables below.
    """
    lum = _to_luminance(image)
    if threshold == "otsu":
        thr = otsu_threshold(lum)
    else:
        thr = float(threshold)
        if not 0.0 <= thr < 1.0:
            raise ValueError(f"fixed threshold must lie in [0, 1), got {thr}")
    return connected_components(lum > thr, connectivity=8)


@dataclass
class NaiveDetector:
    """Callable wrapper around naive_detector with a stable identifier."""

    threshold: object = "otsu"

    @property
    def identifier(self) -> str:
        if self.threshold == "otsu":
            return "naive:otsu"
        return f"naive:fixed:{float(self.threshold)}"

    def __call__(self, image: Image) -> InstanceMask:
        return naive_detector(image, self.threshold)


@dataclass
class ExternalCommandDetector:
    """Adapter for an external segmentation tool.

    The command template must contain {input} and {output} placeholders;
    it is invoked with the image written to {input} and must write a label
    raster to {output}. A nonzero exit status is a DetectorError.
    """

    command: str

    @property
    def identifier(self) -> str:
        return f"cmd:{self.command}"

    def __call__(self, image: Image) -> InstanceMask:
        if "{input}" not in self.command or "{output}" not in self.command:
            raise DetectorError("detector command must contain {input} and {output}")
        with tempfile.TemporaryDirectory(prefix="cytostyle-det-") as tmp:
            in_path = Path(tmp) / "input.tif"
            out_path = Path(tmp) / "output.tif"
            save_image(image, in_path, bit_depth=16 if image.channels == 1 else 8)
            argv = [
                part.replace("{input}", str(in_path)).replace("{output}", str(out_path))
                for part in shlex.split(self.command)
            ]
            result = subprocess.run(argv, capture_output=True, text=True)
            if result.returncode != 0:
                raise DetectorError(
                    f"detector exited with status {result.returncode}: {result.stderr.strip()}"
                )
            if not out_path.exists():
                raise DetectorError("detector exited 0 but wrote no output mask")
            mask = load_mask(out_path)
        if mask.shape != (image.height, image.width):
            raise DetectorError(
                f"detector mask shape {mask.shape} does not match image "
                f"{(image.height, image.width)}"
            )
        return mask


def detector_from_id(detector_id: str):
    """Build a detector callable from its identifier string.

    Recognized forms: "naive:otsu", "naive:fixed:<t>", "cmd:<template>".
    """
    if detector_id == "naive:otsu":
        return NaiveDetector("otsu")
    if detector_id.startswith("naive:fixed:"):
        return NaiveDetector(float(detector_id.split(":", 2)[2]))
    if detector_id.startswith("cmd:"):
        return ExternalCommandDetector(detector_id.split(":", 1)[1])
    raise DetectorError(f"unknown detector id {detector_id!r}")


def average_cell_length(masks: list[InstanceMask]) -> float:
    """Mean equivalent diameter over all instances of all masks."""
    diameters = [s.equivalent_diameter for mask in masks for s in instance_stats(mask)]
    if not diameters:
        raise NoCellsError("no cells detected: cannot estimate average cell length")
    return float(np.mean(diameters))


def compute_size_ratio(
    src_masks: list[InstanceMask], tgt_masks: list[InstanceMask]
) -> SizeRatio:
    """r = mean source cell length / mean target cell length.

    Rescaling target images by r brings their cells to source scale while
    the source geometry (and so its annotations) stays untouched.
    """
    src_stats = [s for mask in src_masks for s in instance_stats(mask)]
    tgt_stats = [s for mask in tgt_masks for s in instance_stats(mask)]
    if not src_stats:
        raise NoCellsError("no cells detected on the source side")
    if not tgt_stats:
        raise NoCellsError("no cells detected on the target side")
    mean_src = float(np.mean([s.equivalent_diameter for s in src_stats]))
    mean_tgt = float(np.mean([s.equivalent_diameter for s in tgt_stats]))
    return SizeRatio(
        r=mean_src / mean_tgt,
        mean_len_src=mean_src,
        mean_len_tgt=mean_tgt,
        n_src_instances=len(src_stats),
        n_tgt_instances=len(tgt_stats),
    )


def _pad_reflect_axis(arr: np.ndarray, before: int, after: int, axis: int) -> np.ndarray:
    # np.pad "reflect" caps each pad at dim-1; iterate for larger pads and
    # fall back to edge replication when an axis is a single pixel wide.
    while before > 0 or after > 0:
        dim = arr.shape[axis]
        if dim == 1:
            pad = [(0, 0)] * arr.ndim
            pad[axis] = (before, after)
            return np.pad(arr, pad, mode="edge")
        b = min(before, dim - 1)
        a = min(after, dim - 1)
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (b, a)
        arr = np.pad(arr, pad, mode="reflect")
        before -= b
        after -= a
    return arr


def prepare_target(image: Image, r: float, working_size: tuple[int, int]) -> Image:
    """Rescale a target image by r, then fit it to the working size.

    Bilinear rescale; per axis, center-crop when larger than the working
    size and reflect-pad when smaller (reflection avoids injecting dark
    borders into the appearance statistics). Output dims always equal
    working_size.
    """
    if not r > 0:
        raise ValueError(f"size ratio must be positive, got {r}")
    out_h, out_w = int(working_size[0]), int(working_size[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"working size must be positive, got {working_size}")
    scaled = rescale_image(image, r, interpolation="bilinear")
    px = scaled.pixels
    # Crop first (centered), then pad (centered, extra pixel trailing).
    for axis, target in ((0, out_h), (1, out_w)):
        size = px.shape[axis]
        if size > target:
            start = (size - target) // 2
            px = np.take(px, range(start, start + target), axis=axis)
        elif size < target:
            before = (target - size) // 2
            px = _pad_reflect_axis(px, before, target - size - before, axis)
    return Image(px, path=image.path)
