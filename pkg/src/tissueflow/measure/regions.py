"""Connected components, nodal overlap, Feret extent and masked statistics."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from tissueflow import kernels
from tissueflow.errors import EmptyComponent, EmptyMask, ShapeMismatch

_N4 = ((-1, 0), (0, -1), (0, 1), (1, 0))
_N8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _search_label(grid: np.ndarray, connectivity: int, pop_front: bool):
    g = np.asarray(grid).astype(bool)
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    nbrs = _N4 if connectivity == 4 else _N8
    rows, cols = g.shape
    labels = np.zeros((rows, cols), dtype=np.int32)
    count = 0
    for r0, c0 in zip(*np.nonzero(g)):
        if labels[r0, c0]:
            continue
        count += 1
        labels[r0, c0] = count
        frontier = deque([(int(r0), int(c0))])
        while frontier:
            r, c = frontier.popleft() if pop_front else frontier.pop()
            for dr, dc in nbrs:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and g[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = count
                    frontier.append((rr, cc))
    return count, labels


def count_components(grid: np.ndarray, connectivity: int = 8, method: str = "union_find"):
    """Count connected components; returns ``(count, labels)``.

    Labels run 1..count in order of each component's first pixel in raster
    order, so all three methods (``union_find``, ``dfs``, ``bfs``) agree.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {grid.shape}")
    if method == "union_find":
        return kernels.label_components(grid, connectivity)
    if method == "dfs":
        return _search_label(grid, connectivity, pop_front=False)
    if method == "bfs":
        return _search_label(grid, connectivity, pop_front=True)
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True, eq=False)
class NodeResult:
    label: int
    positive: bool
    overlap_area: int
    deposit_component: np.ndarray  # bool mask of the largest overlap component

    @property
    def deposit_area(self) -> int:
        return int(self.deposit_component.sum())


def node_positivity(node_labels: np.ndarray, tumor_mask: np.ndarray) -> dict[int, NodeResult]:
    """Per lymph-node label, whether tumor overlaps it and the largest deposit."""
    labels = np.asarray(node_labels)
    tumor = np.asarray(tumor_mask).astype(bool)
    if labels.shape != tumor.shape:
        raise ShapeMismatch(f"labels {labels.shape} vs tumor {tumor.shape}")
    out = {}
    for lab in np.unique(labels):
        lab = int(lab)
        if lab == 0:
            continue
        overlap = tumor & (labels == lab)
        area = int(overlap.sum())
        deposit = np.zeros_like(overlap)
        if area:
            n, comp = kernels.label_components(overlap, 8)
            sizes = np.bincount(comp.ravel(), minlength=n + 1)
            sizes[0] = 0
            deposit = comp == int(np.argmax(sizes))
        out[lab] = NodeResult(lab, area > 0, area, deposit)
    return out


def positive_node_count(results: dict[int, NodeResult]) -> int:
    return sum(r.positive for r in results.values())


def _boundary_pixels(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    rows, cols = np.nonzero(mask & ~interior)
    return np.stack([cols, rows], axis=1).astype(np.int64)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of integer points, counterclockwise, no collinear points."""
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.int64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.int64)


def _antipodal_pairs(hull: list[tuple[int, int]]):
    """All antipodal vertex pairs of a convex polygon (rotating calipers).

    Uses exact integer areas; antipodality is preserved under per-axis
    scaling, so the pairs are valid for any anisotropic spacing.
    """
    m = len(hull)

    def area2(a, b, c):
        return abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    j = 1
    for i in range(m):
        ni = (i + 1) % m
        while area2(hull[i], hull[ni], hull[(j + 1) % m]) > area2(hull[i], hull[ni], hull[j]):
            j = (j + 1) % m
        yield i, j
        yield ni, j
        nj = (j + 1) % m
        if area2(hull[i], hull[ni], hull[nj]) == area2(hull[i], hull[ni], hull[j]):
            yield i, nj
            yield ni, nj


def max_extent_mm(component: np.ndarray, spacing=(1.0, 1.0)) -> float:
    """Maximum Feret diameter between boundary pixel centres, in physical units.

    ``spacing`` is ``(dx, dy)``: column pitch then row pitch. Single-pixel
    components report one pixel pitch (the smaller of the two).
    """
    mask = np.asarray(component).astype(bool)
    if not mask.any():
        raise EmptyComponent("component has no pixels")
    dx, dy = (float(s) for s in spacing)
    hull = [tuple(p) for p in _convex_hull(_boundary_pixels(mask)).tolist()]
    best = 0.0
    if len(hull) == 2:
        pairs = [(0, 1)]
    elif len(hull) > 2:
        pairs = _antipodal_pairs(hull)
    else:
        pairs = []
    for a, b in pairs:
        ex = (hull[a][0] - hull[b][0]) * dx
        ey = (hull[a][1] - hull[b][1]) * dy
        best = max(best, ex * ex + ey * ey)
    return max(math.sqrt(best), min(dx, dy))


def masked_mean_intensity(volume: np.ndarray, mask: np.ndarray) -> float:
    """Mean of ``volume`` over voxels where ``mask`` is set (input units, e.g. HU)."""
    vol = np.asarray(volume, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if vol.shape != m.shape:
        raise ShapeMismatch(f"volume {vol.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptyMask("mask selects no voxels")
    return float(vol[m].mean())
