"""Left-ventricular wall thickness along outward endocardial normals."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from tissueflow import kernels
from tissueflow.errors import EmptyMask, NoIntersection, ShapeMismatch
from tissueflow.measure.contours import largest_contour

logger = logging.getLogger(__name__)

RAY_STEP_PX = 0.25
BISECT_ITERS = 10
TANGENT_REACH = 2
MAX_SKIP_FRACTION = 0.5
_CHUNK = 64


@dataclass(frozen=True, eq=False)
class WallThickness:
    wt_max_ed: float            # mm
    per_slice: np.ndarray       # max thickness per slice at ED, NaN where LVBP is empty
    ed_frame: int
    witness: tuple              # (slice, endo point, epi point) in pixel coordinates
    skipped: int = 0


def ed_frame(lvbp: np.ndarray) -> int:
    """End-diastole frame: largest LV blood-pool voxel count, lowest index on ties."""
    areas = np.asarray(lvbp).reshape(lvbp.shape[0], -1).astype(bool).sum(axis=1)
    return int(np.argmax(areas))


def outward_normals(verts: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    tangent = np.roll(verts, -TANGENT_REACH, axis=0) - np.roll(verts, TANGENT_REACH, axis=0)
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    length = np.hypot(normal[:, 0], normal[:, 1])
    length[length == 0] = 1.0
    normal /= length[:, None]
    flip = np.einsum("ij,ij->i", normal, verts - centroid) < 0
    normal[flip] *= -1
    return normal


def ray_exit(p: np.ndarray, n: np.ndarray, polygon: np.ndarray, max_len: float) -> float | None:
    """Distance (px) along ``p + s*n`` to the first crossing out of ``polygon``.

    Marches in fixed steps until a sample falls outside (even-odd rule), then
    bisects the bracketing interval. ``None`` when no exit within ``max_len``.
    """
    steps = int(math.ceil(max_len / RAY_STEP_PX))
    k = 1
    while k <= steps:
        ks = np.arange(k, min(k + _CHUNK, steps + 1), dtype=np.float64)
        pts = p[None, :] + (ks * RAY_STEP_PX)[:, None] * n[None, :]
        inside = kernels.points_in_polygon(pts, polygon)
        outside = np.flatnonzero(~inside)
        if len(outside):
            hi = ks[outside[0]] * RAY_STEP_PX
            lo = hi - RAY_STEP_PX
            for _ in range(BISECT_ITERS):
                mid = 0.5 * (lo + hi)
                if kernels.points_in_polygon((p + mid * n)[None, :], polygon)[0]:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)
        k += _CHUNK
    return None


def slice_thickness(bp: np.ndarray, myo: np.ndarray, spacing=(1.0, 1.0)):
    """Thickness samples for one 2D slice.

    Returns ``(thickness_mm array, endo vertices, exit points, skipped count)``
    or ``None`` when the blood pool is empty.
    """
    bp = np.asarray(bp).astype(bool)
    myo = np.asarray(myo).astype(bool)
    endo = largest_contour(bp)
    if endo is None:
        return None
    epi = largest_contour(bp | myo)
    dx, dy = (float(s) for s in spacing)
    rows, cols = np.nonzero(bp)
    centroid = np.array([cols.mean() + 0.5, rows.mean() + 0.5])
    verts = endo.vertices
    normals = outward_normals(verts, centroid)
    max_len = float(math.hypot(*bp.shape)) + 2.0
    thick = np.full(len(verts), np.nan)
    exits = np.full_like(verts, np.nan)
    for idx in range(len(verts)):
        s = ray_exit(verts[idx], normals[idx], epi.vertices, max_len)
        if s is None:
            continue
        step = s * normals[idx]
        exits[idx] = verts[idx] + step
        thick[idx] = math.sqrt((step[0] * dx) ** 2 + (step[1] * dy) ** 2)
    skipped = int(np.isnan(thick).sum())
    return thick, verts, exits, skipped


def measure_wall_thickness(lvbp: np.ndarray, lvmyo: np.ndarray, spacing=(1.0, 1.0),
                           rvbp: np.ndarray | None = None) -> WallThickness:
    """Maximal LV wall thickness at end-diastole.

    Masks are ``(frames, slices, rows, cols)``; 3D input is read as a single
    slice per frame. ``spacing`` is ``(dx, dy)`` in mm. ``rvbp`` is accepted
    for interface completeness and not used.
    """
    lvbp = np.asarray(lvbp)
    lvmyo = np.asarray(lvmyo)
    if lvbp.shape != lvmyo.shape:
        raise ShapeMismatch(f"LVBP {lvbp.shape} vs LVMYO {lvmyo.shape}")
    if lvbp.ndim == 3:
        lvbp = lvbp[:, None]
        lvmyo = lvmyo[:, None]
    if lvbp.ndim != 4:
        raise ShapeMismatch(f"expected (frames, slices, rows, cols), got {lvbp.shape}")
    if not lvbp.any():
        raise EmptyMask("LV blood pool is empty in every frame")
    t = ed_frame(lvbp)
    n_slices = lvbp.shape[1]
    per_slice = np.full(n_slices, np.nan)
    best = -1.0
    witness = ()
    total = skipped = 0
    for z in range(n_slices):
        res = slice_thickness(lvbp[t, z], lvmyo[t, z], spacing)
        if res is None:
            continue
        thick, verts, exits, sk = res
        total += len(thick)
        skipped += sk
        if np.all(np.isnan(thick)):
            continue
        i = int(np.nanargmax(thick))
        per_slice[z] = thick[i]
        if thick[i] > best:
            best = float(thick[i])
            witness = (z, tuple(verts[i]), tuple(exits[i]))
    if skipped:
        logger.warning("wall thickness: %d of %d rays found no epicardial crossing", skipped, total)
    if total == 0 or skipped > MAX_SKIP_FRACTION * total:
        raise NoIntersection(f"{skipped} of {total} endocardial rays never left the epicardium")
    return WallThickness(best, per_slice, t, witness, skipped)
