# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Integer and geometric kernels are bit-identical to ``_fallback``;
``softmax_xent`` sums in a different order and agrees to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, log, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t FNV_PRIME = 0x100000001B3
FNV_OFFSET = 0xCBF29CE484222325


def fnv1a64(data, h=FNV_OFFSET):
    cdef const unsigned char[::1] buf = memoryview(data).cast("B")
    cdef uint64_t acc = <uint64_t>h
    cdef Py_ssize_t i, n = buf.shape[0]
    with nogil:
        for i in range(n):
            acc = (acc ^ buf[i]) * FNV_PRIME
    return int(acc)


def nearest_max_min(tumor, epi, double cell=64.0):
    cdef double[:, ::1] t = np.ascontiguousarray(tumor, dtype=np.float64)
    cdef double[:, ::1] e = np.ascontiguousarray(epi, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], m = e.shape[0]
    cdef Py_ssize_t i, j, k
    cdef int64_t min_cx, max_cx, min_cy, max_cy, cx, cy, gx, gy, ring, step
    cdef int64_t ncx, ncy, ix, iy
    cdef double px, py, dx, dy, d2, near, reach, best_d2 = -1.0
    cdef Py_ssize_t near_j, best_i = -1, best_j = -1

    # bucket epi points into a dense grid of cells: CSR layout (start, members)
    ecx = np.empty(m, dtype=np.int64)
    ecy = np.empty(m, dtype=np.int64)
    cdef int64_t[::1] vcx = ecx
    cdef int64_t[::1] vcy = ecy
    for j in range(m):
        vcx[j] = <int64_t>floor(e[j, 0] / cell)
        vcy[j] = <int64_t>floor(e[j, 1] / cell)
    min_cx = ecx.min(); max_cx = ecx.max()
    min_cy = ecy.min(); max_cy = ecy.max()
    ncx = max_cx - min_cx + 1
    ncy = max_cy - min_cy + 1
    flat = (ecx - min_cx) * ncy + (ecy - min_cy)
    order = np.argsort(flat, kind="stable").astype(np.int64)
    counts = np.bincount(flat, minlength=ncx * ncy)
    starts_np = np.zeros(ncx * ncy + 1, dtype=np.int64)
    np.cumsum(counts, out=starts_np[1:])
    cdef int64_t[::1] members = order
    cdef int64_t[::1] starts = starts_np
    cdef int64_t cell_id

    with nogil:
        for i in range(n):
            px = t[i, 0]
            py = t[i, 1]
            cx = <int64_t>floor(px / cell)
            cy = <int64_t>floor(py / cell)
            near = INFINITY
            near_j = -1
            ring = 0
            while True:
                for gx in range(cx - ring, cx + ring + 1):
                    if gx == cx - ring or gx == cx + ring:
                        step = 1
                    else:
                        step = 2 * ring
                    if step < 1:
                        step = 1
                    gy = cy - ring
                    while gy <= cy + ring:
                        ix = gx - min_cx
                        iy = gy - min_cy
                        if 0 <= ix < ncx and 0 <= iy < ncy:
                            cell_id = ix * ncy + iy
                            for k in range(starts[cell_id], starts[cell_id + 1]):
                                j = members[k]
                                dx = px - e[j, 0]
                                dy = py - e[j, 1]
                                d2 = dx * dx + dy * dy
                                if d2 < near or (d2 == near and j < near_j):
                                    near = d2
                                    near_j = j
                        gy = gy + step
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


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t a) noexcept nogil:
    cdef Py_ssize_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


def label_components(grid, int connectivity=8):
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    cdef cnp.uint8_t[:, ::1] g = np.ascontiguousarray(np.asarray(grid).astype(bool), dtype=np.uint8)
    cdef Py_ssize_t rows = g.shape[0], cols = g.shape[1]
    labels_np = np.zeros((rows, cols), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] lab = labels_np
    parent_np = np.zeros(rows * cols + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_np
    remap_np = np.zeros(rows * cols + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] remap = remap_np
    cdef Py_ssize_t r, c, k, rr, cc, cur, other, lo, hi, nlab = 1, count = 0, a, root
    cdef int dr[4]
    cdef int dc[4]
    cdef int noff
    if connectivity == 8:
        dr[0] = -1; dc[0] = -1
        dr[1] = -1; dc[1] = 0
        dr[2] = -1; dc[2] = 1
        dr[3] = 0; dc[3] = -1
        noff = 4
    else:
        dr[0] = -1; dc[0] = 0
        dr[1] = 0; dc[1] = -1
        noff = 2
    with nogil:
        for r in range(rows):
            for c in range(cols):
                if not g[r, c]:
                    continue
                cur = 0
                for k in range(noff):
                    rr = r + dr[k]
                    cc = c + dc[k]
                    if rr >= 0 and 0 <= cc < cols and lab[rr, cc] != 0:
                        other = _find(parent, lab[rr, cc])
                        if cur == 0:
                            cur = other
                        elif other != cur:
                            if cur < other:
                                lo = cur; hi = other
                            else:
                                lo = other; hi = cur
                            parent[hi] = lo
                            cur = lo
                if cur == 0:
                    cur = nlab
                    parent[cur] = cur
                    nlab += 1
                lab[r, c] = <cnp.int32_t>cur
        for a in range(1, nlab):
            root = _find(parent, a)
            if root == a:
                count += 1
                remap[a] = count
            else:
                remap[a] = remap[root]
        for r in range(rows):
            for c in range(cols):
                if lab[r, c] != 0:
                    lab[r, c] = <cnp.int32_t>remap[lab[r, c]]
    return int(count), labels_np


def points_in_polygon(points, polygon):
    cdef double[:, ::1] pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    cdef double[:, ::1] poly = np.ascontiguousarray(polygon, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], m = poly.shape[0], i, k, kn
    out_np = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_np
    cdef double px, py, x0, y0, x1, y1, xc
    cdef int hits
    with nogil:
        for i in range(n):
            px = pts[i, 0]
            py = pts[i, 1]
            hits = 0
            for k in range(m):
                kn = k + 1
                if kn == m:
                    kn = 0
                x0 = poly[k, 0]; y0 = poly[k, 1]
                x1 = poly[kn, 0]; y1 = poly[kn, 1]
                if (y0 > py) != (y1 > py):
                    xc = (x1 - x0) * (py - y0) / (y1 - y0) + x0
                    if px < xc:
                        hits += 1
            out[i] = hits % 2
    return out_np.view(bool)


def softmax_xent(const double[::1] th, const double[:, ::1] xv, const cnp.int64_t[::1] yv,
                 int k, double l2):
    """Mean softmax cross-entropy with L2 on the weights, and its gradient.

    ``theta`` is the flattened ``(k, d+1)`` matrix ``[W | b]``. Arrays must be
    C-contiguous float64 (``x``, ``theta``) and int64 (``y``).
    """
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], w = d + 1
    cdef Py_ssize_t i, j, c
    grad_np = np.zeros(k * w, dtype=np.float64)
    cdef double[::1] g = grad_np
    cdef double z[64]
    if k > 64:
        raise ValueError("at most 64 classes")
    cdef double zmax, s, p, loss = 0.0, reg = 0.0
    with nogil:
        for i in range(n):
            zmax = -INFINITY
            for c in range(k):
                s = th[c * w + d]
                for j in range(d):
                    s += th[c * w + j] * xv[i, j]
                z[c] = s
                if s > zmax:
                    zmax = s
            loss -= z[yv[i]] - zmax
            s = 0.0
            for c in range(k):
                z[c] = exp(z[c] - zmax)
                s += z[c]
            loss += log(s)
            for c in range(k):
                p = z[c] / s
                if c == yv[i]:
                    p -= 1.0
                for j in range(d):
                    g[c * w + j] += p * xv[i, j]
                g[c * w + d] += p
        for c in range(k):
            for j in range(w):
                g[c * w + j] /= n
            for j in range(d):
                reg += th[c * w + j] * th[c * w + j]
                g[c * w + j] += l2 * th[c * w + j]
    return loss / n + 0.5 * l2 * reg, grad_np
