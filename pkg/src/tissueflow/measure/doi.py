"""Depth of invasion: maximum over tumor vertices of the nearest-epithelium distance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tissueflow import kernels
from tissueflow.errors import EmptyContour
from tissueflow.measure.contours import Contour

GRID_CELL_PX = 64.0


@dataclass(frozen=True)
class Measurement:
    value: float
    unit: str
    witness: tuple
    method: str


def _vertices(obj) -> np.ndarray:
    if isinstance(obj, Contour):
        return obj.vertices
    if isinstance(obj, (list, tuple)) and obj and all(isinstance(c, Contour) for c in obj):
        # several contours: use the union of their vertices
        return np.concatenate([c.vertices for c in obj])
    arr = np.asarray(obj, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    return arr.reshape(-1, 2)


def measure_doi(tumor: Contour | np.ndarray,
                epi: Contour | Sequence[Contour] | np.ndarray,
                pixel_size_um: float) -> Measurement:
    """DOI in micrometres with its witness pair ``(p*, q*)`` in pixel coordinates."""
    t = _vertices(tumor)
    e = _vertices(epi)
    if len(t) == 0 or len(e) == 0:
        raise EmptyContour("tumor and epithelium need at least one vertex each")
    if not pixel_size_um > 0:
        raise ValueError(f"pixel size must be positive, got {pixel_size_um}")
    d2, i, j = kernels.nearest_max_min(t, e, GRID_CELL_PX)
    d_max = math.sqrt(d2)
    p = (float(t[i, 0]), float(t[i, 1]))
    q = (float(e[j, 0]), float(e[j, 1]))
    return Measurement(d_max * pixel_size_um, "um", (p, q), "max-min-vertex-distance")
