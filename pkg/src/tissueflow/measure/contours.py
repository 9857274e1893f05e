"""Pixel-boundary contour tracing.

Coordinates are ``(x, y)`` with x along columns and y along rows; pixel
``(r, c)`` covers the unit square ``[c, c+1] x [r, r+1]``. Traced contours run
along pixel edges with one vertex per lattice point and have positive
shoelace area in these coordinates (interior on the left of travel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from tissueflow import kernels


@dataclass(frozen=True, eq=False)
class Contour:
    vertices: np.ndarray  # (n, 2) float64, (x, y)
    closed: bool = True

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "vertices", v)
        if self.closed and len(v) < 3:
            raise ValueError("closed contour needs at least 3 vertices")
        if len(v) > 1:
            nxt = np.roll(v, -1, axis=0) if self.closed else v[1:]
            cur = v if self.closed else v[:-1]
            if np.any(np.all(cur == nxt, axis=1)):
                raise ValueError("consecutive duplicate vertices")

    def __len__(self) -> int:
        return len(self.vertices)

    def signed_area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def perimeter(self) -> float:
        v = self.vertices
        seg = np.roll(v, -1, axis=0) - v if self.closed else np.diff(v, axis=0)
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def _trace_outer(filled: np.ndarray) -> np.ndarray:
    """Trace the outer pixel-edge boundary of a hole-free 8-connected blob.

    ``filled`` must be padded so the blob does not touch the array edge.
    """
    m = filled
    up = np.zeros_like(m)
    up[1:] = m[:-1]
    down = np.zeros_like(m)
    down[:-1] = m[1:]
    left = np.zeros_like(m)
    left[:, 1:] = m[:, :-1]
    right = np.zeros_like(m)
    right[:, :-1] = m[:, 1:]

    out: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(rs, cs, x0, y0, x1, y1):
        for r, c in zip(rs.tolist(), cs.tolist()):
            out.setdefault((c + x0, r + y0), []).append((c + x1, r + y1))

    # interior kept on the left of each directed edge
    add(*np.nonzero(m & ~up), 0, 0, 1, 0)        # y = r edge, +x
    add(*np.nonzero(m & ~down), 1, 1, 0, 1)      # y = r+1 edge, -x
    add(*np.nonzero(m & ~left), 0, 1, 0, 0)      # x = c edge, -y
    add(*np.nonzero(m & ~right), 1, 0, 1, 1)     # x = c+1 edge, +y

    r0, c0 = (int(a[0]) for a in np.nonzero(m))
    start = (c0, r0)
    prev = start
    cur = (c0 + 1, r0)
    verts = [start]
    while cur != start:
        verts.append(cur)
        dx, dy = cur[0] - prev[0], cur[1] - prev[1]
        options = out[cur]
        if len(options) == 1:
            nxt = options[0]
        else:
            # saddle: turn right so diagonal neighbours stay joined (8-connectivity)
            want = (cur[0] + dy, cur[1] - dx)
            nxt = want if want in options else options[0]
        prev, cur = cur, nxt
    return np.asarray(verts, dtype=np.float64)


def extract_contours(mask: np.ndarray) -> list[Contour]:
    """One closed outer contour per 8-connected foreground component.

    Components are ordered by first pixel in raster order.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {mask.shape}")
    count, labels = kernels.label_components(mask, 8)
    contours = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        blob = labels[sl] == lab
        filled = np.pad(ndimage.binary_fill_holes(blob), 1)
        verts = _trace_outer(filled)
        # undo the padding and move to image coordinates
        verts += (sl[1].start - 1, sl[0].start - 1)
        contours.append(Contour(verts))
    return contours


def largest_contour(mask: np.ndarray) -> Contour | None:
    found = extract_contours(mask)
    if not found:
        return None
    return max(found, key=lambda c: abs(c.signed_area()))
