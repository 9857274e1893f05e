"""Pure-Python/NumPy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and bit-identical results. ``tissueflow.kernels`` picks one at
import time.
"""

from __future__ import annotations

import math

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, h: int = FNV_OFFSET) -> int:
    """FNV-1a over ``data``, continuing from running hash ``h``."""
    for byte in memoryview(data).cast("B"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def nearest_max_min(tumor: np.ndarray, epi: np.ndarray, cell: float = 64.0):
    """Max over tumor points of the squared distance to the nearest epi point.

    Returns ``(d2_max, i_tumor, j_epi)``. Ties: first tumor index with a
    strictly larger minimum wins; nearest epi point is the lowest index among
    equals. Grid-bucket index with square ring search.
    """
    tumor = np.ascontiguousarray(tumor, dtype=np.float64)
    epi = np.ascontiguousarray(epi, dtype=np.float64)
    buckets: dict[tuple[int, int], list[int]] = {}
    ex = epi[:, 0].tolist()
    ey = epi[:, 1].tolist()
    for j in range(len(ex)):
        key = (math.floor(ex[j] / cell), math.floor(ey[j] / cell))
        buckets.setdefault(key, []).append(j)
    keys = list(buckets)
    min_cx = min(k[0] for k in keys)
    max_cx = max(k[0] for k in keys)
    min_cy = min(k[1] for k in keys)
    max_cy = max(k[1] for k in keys)

    best_d2 = -1.0
    best_i = -1
    best_j = -1
    for i, (px, py) in enumerate(tumor.tolist()):
        cx = math.floor(px / cell)
        cy = math.floor(py / cell)
        near = math.inf
        near_j = -1
        ring = 0
        while True:
            for gx in range(cx - ring, cx + ring + 1):
                edge_x = gx == cx - ring or gx == cx + ring
                step = 1 if edge_x else 2 * ring
                for gy in range(cy - ring, cy + ring + 1, max(step, 1)):
                    members = buckets.get((gx, gy))
                    if members is None:
                        continue
                    for j in members:
                        dx = px - ex[j]
                        dy = py - ey[j]
                        d2 = dx * dx + dy * dy
                        if d2 < near or (d2 == near and j < near_j):
                            near = d2
                            near_j = j
            # everything outside rings 0..ring is at least ring*cell away;
            # strict so an equidistant lower index further out is not missed
            reach = ring * cell
            if near_j >= 0 and near < reach * reach:
                break
            if (cx - ring <= min_cx and cx + ring >= max_cx
                    and cy - ring <= min_cy and cy + ring >= max_cy):
                break
            ring += 1
        if near > best_d2:
            best_d2 = near
            best_i = i
            best_j = near_j
    return best_d2, best_i, best_j


def label_components(grid: np.ndarray, connectivity: int = 8):
    """Two-pass union-find labeling; labels numbered in raster first-encounter order."""
    g = np.asarray(grid).astype(bool)
    rows, cols = g.shape
    labels = np.zeros((rows, cols), dtype=np.int32)
    parent = [0]

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    if connectivity == 8:
        offsets = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    elif connectivity == 4:
        offsets = ((-1, 0), (0, -1))
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")

    gl = g.tolist()
    lab = [[0] * cols for _ in range(rows)]
    for r in range(rows):
        row = gl[r]
        for c in range(cols):
            if not row[c]:
                continue
            cur = 0
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr and 0 <= cc < cols and lab[rr][cc]:
                    other = find(lab[rr][cc])
                    if cur == 0:
                        cur = other
                    elif other != cur:
                        lo, hi = (cur, other) if cur < other else (other, cur)
                        parent[hi] = lo
                        cur = lo
            if cur == 0:
                cur = len(parent)
                parent.append(cur)
            lab[r][c] = cur

    # provisional labels are created in raster order and unions always keep the
    # smaller root, so root order == first-encounter order
    remap = [0] * len(parent)
    count = 0
    for a in range(1, len(parent)):
        root = find(a)
        if root == a:
            count += 1
            remap[a] = count
        else:
            remap[a] = remap[root]
    for r in range(rows):
        row = lab[r]
        for c in range(cols):
            if row[c]:
                labels[r, c] = remap[row[c]]
    return count, labels


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd containment test of each point against a closed polygon."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(polygon, dtype=np.float64)
    x0 = poly[:, 0]
    y0 = poly[:, 1]
    x1 = np.roll(x0, -1)
    y1 = np.roll(y0, -1)
    px = pts[:, 0:1]
    py = pts[:, 1:2]
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = (x1 - x0) * (py - y0) / (y1 - y0) + x0
    hits = straddle & (px < x_cross)
    return (np.count_nonzero(hits, axis=1) % 2).astype(bool)


def softmax_xent(theta: np.ndarray, x: np.ndarray, y: np.ndarray, k: int, l2: float):
    """Mean softmax cross-entropy with L2 on the weights, and its gradient.

    ``theta`` is the flattened ``(k, d+1)`` matrix ``[W | b]``.
    """
    n, d = x.shape
    params = np.asarray(theta, dtype=np.float64).reshape(k, d + 1)
    w = params[:, :d]
    z = x @ w.T + params[:, d]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    rows = np.arange(n)
    loss = float((np.log(s) - z[rows, y]).sum() / n + 0.5 * l2 * np.vdot(w, w))
    e /= s[:, None]
    e[rows, y] -= 1.0
    grad = np.empty((k, d + 1))
    grad[:, :d] = (e.T @ x) / n + l2 * w
    grad[:, d] = e.sum(axis=0) / n
    return loss, grad.ravel()
