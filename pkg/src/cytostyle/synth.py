"""Procedural cell-like images with exact masks, for demos and training.

Two appearance families with shared geometry statistics: one dim and
smooth, one bright and grainy. They stand in for a source/target dataset
pair whose visual gap is appearance, not cell size, which makes them a
clean substrate for verifying that appearance moves while shapes stay.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Image, InstanceMask, save_image, save_mask

__all__ = [
    "TextureFamily",
    "FAMILY_DIM_SMOOTH",
    "FAMILY_BRIGHT_GRAIN",
    "make_cell_image",
    "make_dataset",
    "write_demo_pair",
]


@dataclass(frozen=True)
class TextureFamily:
    name: str
    background: float
    cell_intensity: float
    base_noise: float        # additive smooth background mottle
    cell_speckle: float      # spatially correlated grain inside cells
    cell_gradient: float     # radial shading inside cells


FAMILY_DIM_SMOOTH = TextureFamily(
    name="dim_smooth",
    background=0.10,
    cell_intensity=0.45,
    base_noise=0.010,
    cell_speckle=0.0,
    cell_gradient=0.12,
)

FAMILY_BRIGHT_GRAIN = TextureFamily(
    name="bright_grain",
    background=0.15,
    cell_intensity=0.85,
    base_noise=0.010,
    cell_speckle=0.15,
    cell_gradient=0.0,
)


def _smooth_noise(shape, rng: np.random.Generator, sigma: float = 1.2) -> np.ndarray:
    """Unit-variance spatially correlated noise (learnable, unlike i.i.d.)."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    return field / max(field.std(), 1e-9)


def make_cell_image(
    size: int,
    family: TextureFamily,
    rng: np.random.Generator,
    n_cells: tuple[int, int] = (3, 6),
    radius: tuple[float, float] = (3.0, 6.0),
) -> tuple[Image, InstanceMask]:
    """One image of non-overlapping disks plus its exact instance mask."""
    labels = np.zeros((size, size), dtype=np.int32)
    pixels = np.full((size, size), family.background, dtype=np.float64)
    rows, cols = np.indices((size, size))

    placed: list[tuple[float, float, float]] = []
    target_count = int(rng.integers(n_cells[0], n_cells[1] + 1))
    attempts = 0
    while len(placed) < target_count and attempts < 200:
        attempts += 1
        r = float(rng.uniform(radius[0], radius[1]))
        cy = float(rng.uniform(r, size - r))
        cx = float(rng.uniform(r, size - r))
        if any((cy - y) ** 2 + (cx - x) ** 2 < (r + rr + 1.0) ** 2 for y, x, rr in placed):
            continue
        placed.append((cy, cx, r))
        label = len(placed)
        dist2 = (rows - cy) ** 2 + (cols - cx) ** 2
        inside = dist2 <= r * r
        labels[inside] = label
        shade = family.cell_intensity * (
            1.0 - family.cell_gradient * np.sqrt(dist2[inside]) / r
        )
        if family.cell_speckle > 0:
            grain = _smooth_noise((size, size), rng)[inside]
            shade = shade * (1.0 + family.cell_speckle * grain)
        pixels[inside] = shade

    pixels += family.base_noise * _smooth_noise((size, size), rng)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return Image(pixels.astype(np.float32)), InstanceMask(labels)


def make_dataset(
    n: int, size: int, family: TextureFamily, seed: int = 0
) -> list[tuple[Image, InstanceMask]]:
    rng = np.random.default_rng(seed)
    return [make_cell_image(size, family, rng) for _ in range(n)]


def write_demo_pair(
    out_dir,
    size: int = 32,
    n_src: int = 24,
    n_tgt: int = 24,
    seed: int = 0,
    src_family: TextureFamily = FAMILY_DIM_SMOOTH,
    tgt_family: TextureFamily = FAMILY_BRIGHT_GRAIN,
) -> dict:
    """Write a source dataset (images + masks) and a target dataset (images).

    Returns the path lists, ready to drop into a pair manifest.
    """
    out_dir = Path(out_dir)
    src_img_dir = out_dir / "src" / "images"
    src_msk_dir = out_dir / "src" / "masks"
    tgt_img_dir = out_dir / "tgt" / "images"
    for d in (src_img_dir, src_msk_dir, tgt_img_dir):
        d.mkdir(parents=True, exist_ok=True)

    src_images, src_masks, tgt_images = [], [], []
    for i, (image, mask) in enumerate(make_dataset(n_src, size, src_family, seed)):
        img_path = src_img_dir / f"{i:04d}.tif"
        msk_path = src_msk_dir / f"{i:04d}.tif"
        save_image(image, img_path, bit_depth=16)
        save_mask(mask, msk_path)
        src_images.append(str(img_path))
        src_masks.append(str(msk_path))
    for i, (image, _) in enumerate(make_dataset(n_tgt, size, tgt_family, seed + 1)):
        img_path = tgt_img_dir / f"{i:04d}.tif"
        save_image(image, img_path, bit_depth=16)
        tgt_images.append(str(img_path))
    return {"src_images": src_images, "src_masks": src_masks, "tgt_images": tgt_images}
