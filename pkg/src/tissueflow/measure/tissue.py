"""Tissue/background separation for low-resolution slide thumbnails."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from tissueflow import kernels
from tissueflow.errors import DegenerateImageWarning


@dataclass(frozen=True)
class TissueMaskConfig:
    block_size: int = 51        # adaptive threshold window (pixels, odd)
    offset: float = 8.0         # tissue if intensity < local mean - offset
    smooth_sigma: float = 1.0   # Gaussian pre-smoothing; 0 disables
    closing_radius: int = 3
    min_area: int = 64          # components smaller than this are dropped
    border: int = 4             # width of the zeroed frame at the image edge


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    count, labels = kernels.label_components(mask, 8)
    if count == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def preprocess_tissue_mask(thumbnail: np.ndarray, config: TissueMaskConfig = TissueMaskConfig(),
                           store=None, prefix: str = "mask2D_tissue") -> np.ndarray:
    """Binary tissue mask from a grayscale thumbnail (tissue darker than glass).

    Stages: adaptive threshold, closing, hole filling, small-component removal,
    border zeroing. With ``store`` given, every stage is written as
    ``<prefix>_<stage>`` and the result as ``<prefix>``.
    """
    img = np.asarray(thumbnail, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a nonempty 2D image, got shape {img.shape}")
    if np.ptp(img) == 0:
        warnings.warn("constant image, returning an empty mask", DegenerateImageWarning,
                      stacklevel=2)
        mask = np.zeros(img.shape, dtype=bool)
        if store is not None:
            store.write_array(prefix, mask.astype(np.uint8), actor="tissue_mask")
        return mask

    stages = {}
    if config.smooth_sigma > 0:
        img = ndimage.gaussian_filter(img, config.smooth_sigma, mode="reflect")
    local_mean = ndimage.uniform_filter(img, size=config.block_size, mode="reflect")
    mask = img < local_mean - config.offset
    stages["threshold"] = mask

    r = config.closing_radius
    if r > 0:
        padded = np.pad(mask, r + 1, mode="edge")
        mask = ndimage.binary_closing(padded, structure=disk(r))[r + 1:-(r + 1), r + 1:-(r + 1)]
    stages["closed"] = mask

    mask = ndimage.binary_fill_holes(mask)
    stages["filled"] = mask

    mask = remove_small_components(mask, config.min_area)
    stages["filtered"] = mask

    b = config.border
    if b > 0:
        mask = mask.copy()
        mask[:b] = False
        mask[-b:] = False
        mask[:, :b] = False
        mask[:, -b:] = False

    if store is not None:
        for stage, m in stages.items():
            store.write_array(f"{prefix}_{stage}", m.astype(np.uint8), actor="tissue_mask")
        store.write_array(prefix, mask.astype(np.uint8), actor="tissue_mask")
    return mask
