# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``_pykernels``. Same signatures, same results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()

cdef enum:
    KEY_BITS = 21
cdef long long KEY_OFFSET = 1 << (KEY_BITS - 1)
cdef long long KEY_MASK = (1 << KEY_BITS) - 1


def points_in_boxes(points, centers, dims):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] h = np.ascontiguousarray(dims, dtype=np.float64).reshape(-1, 3) * 0.5
    cdef Py_ssize_t n = p.shape[0], k = c.shape[0], i, j
    out_arr = np.zeros((n, k), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(k):
                if (fabs(p[i, 0] - c[j, 0]) <= h[j, 0]
                        and fabs(p[i, 1] - c[j, 1]) <= h[j, 1]
                        and fabs(p[i, 2] - c[j, 2]) <= h[j, 2]):
                    out[i, j] = 1
    return out_arr.view(bool)


def voxel_keys(points, double size):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i
    keys_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] keys = keys_arr
    cdef long long ix, iy, iz
    cdef bint bad = False
    with nogil:
        for i in range(n):
            ix = <long long>floor(p[i, 0] / size) + KEY_OFFSET
            iy = <long long>floor(p[i, 1] / size) + KEY_OFFSET
            iz = <long long>floor(p[i, 2] / size) + KEY_OFFSET
            if ix < 0 or iy < 0 or iz < 0 or ix > KEY_MASK or iy > KEY_MASK or iz > KEY_MASK:
                bad = True
                break
            keys[i] = (ix << (2 * KEY_BITS)) | (iy << KEY_BITS) | iz
    if bad:
        raise ValueError("voxel coordinates out of packable range")
    return keys_arr


def neighbor_table(keys, int radius=1):
    cdef const long long[::1] k = np.ascontiguousarray(keys, dtype=np.int64)
    cdef Py_ssize_t n = k.shape[0], i, j, lo
    cdef int side = 2 * radius + 1
    cdef Py_ssize_t m = side * side * side
    offs_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] offs = offs_arr
    cdef int dx, dy, dz
    j = 0
    for dx in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            for dz in range(-radius, radius + 1):
                offs[j] = ((<long long>dx) << (2 * KEY_BITS)) + ((<long long>dy) << KEY_BITS) + dz
                j += 1
    out_arr = np.full((n, m), -1, dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef long long q
    # keys are sorted, so for a fixed offset the queries are too: one merge walk per offset
    with nogil:
        for j in range(m):
            lo = 0
            for i in range(n):
                q = k[i] + offs[j]
                while lo < n and k[lo] < q:
                    lo += 1
                if lo == n:
                    break
                if k[lo] == q:
                    out[i, j] = lo
    return out_arr


def segment_sum(values, ids, Py_ssize_t n):
    cdef const long long[::1] s = np.ascontiguousarray(ids, dtype=np.int64)
    vals = np.ascontiguousarray(values, dtype=np.float64)
    flat = vals.ndim == 1
    if flat:
        vals = vals[:, None]
    cdef const double[:, ::1] v = vals
    cdef Py_ssize_t rows = v.shape[0], cols = v.shape[1], i, c
    out_arr = np.zeros((n, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(rows):
            for c in range(cols):
                out[s[i], c] += v[i, c]
    return out_arr[:, 0] if flat else out_arr


def trilinear(grid, origin, double spacing, points):
    cdef const double[:, :, :, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] o = np.ascontiguousarray(origin, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], d = g.shape[3], i, a, e
    cdef long long lim[3]
    lim[0] = g.shape[0] - 2
    lim[1] = g.shape[1] - 2
    lim[2] = g.shape[2] - 2
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double u, t[3], wx, wy, w
    cdef long long b[3]
    cdef int dx, dy, dz
    with nogil:
        for i in range(n):
            for a in range(3):
                u = (p[i, a] - o[a]) / spacing
                b[a] = <long long>floor(u)
                if b[a] < 0:
                    b[a] = 0
                if b[a] > lim[a]:
                    b[a] = lim[a]
                t[a] = u - b[a]
                if t[a] < 0.0:
                    t[a] = 0.0
                if t[a] > 1.0:
                    t[a] = 1.0
            for dx in range(2):
                wx = t[0] if dx else 1.0 - t[0]
                for dy in range(2):
                    wy = t[1] if dy else 1.0 - t[1]
                    for dz in range(2):
                        w = wx * wy * (t[2] if dz else 1.0 - t[2])
                        for e in range(d):
                            out[i, e] += w * g[b[0] + dx, b[1] + dy, b[2] + dz, e]
    return out_arr
