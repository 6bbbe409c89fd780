"""Pure numpy implementations of the geometry kernels.

These are the reference versions; ``_ckernels`` mirrors every function here
with explicit loops and must return identical results.
"""
import numpy as np

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1


def points_in_boxes(points, centers, dims):
    """Closed-boundary membership: ``|p - c| <= d / 2`` on every axis.

    Returns a boolean (N, K) array.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    half = np.ascontiguousarray(dims, dtype=np.float64).reshape(-1, 3) * 0.5
    if len(centers) == 0:
        return np.zeros((len(points), 0), dtype=bool)
    diff = np.abs(points[:, None, :] - centers[None, :, :])
    return np.all(diff <= half[None, :, :], axis=2)


def voxel_keys(points, size):
    """Pack integer voxel coordinates ``floor(p / size)`` into int64 keys.

    Key order is lexicographic in (x, y, z), so sorting keys sorts voxels.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    coords = np.floor(points / float(size)).astype(np.int64) + KEY_OFFSET
    if coords.size and (coords.min() < 0 or coords.max() > KEY_MASK):
        raise ValueError("voxel coordinates out of packable range")
    return (coords[:, 0] << (2 * KEY_BITS)) | (coords[:, 1] << KEY_BITS) | coords[:, 2]


def neighbor_table(keys, radius=1):
    """Index of each voxel's neighbours in ``keys`` (sorted, unique), or -1.

    Offsets enumerate the (2r+1)^3 cube in x-major order.
    """
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    offsets = _offset_keys(radius)
    out = np.full((len(keys), len(offsets)), -1, dtype=np.int64)
    if len(keys) == 0:
        return out
    for j, off in enumerate(offsets):
        query = keys + off
        pos = np.searchsorted(keys, query)
        pos_c = np.minimum(pos, len(keys) - 1)
        hit = keys[pos_c] == query
        out[hit, j] = pos_c[hit]
    return out


def _offset_keys(radius):
    r = range(-radius, radius + 1)
    return np.array(
        [(dx << (2 * KEY_BITS)) + (dy << KEY_BITS) + dz for dx in r for dy in r for dz in r],
        dtype=np.int64,
    )


def segment_sum(values, ids, n):
    """Row sums of ``values`` grouped by ``ids``; accumulation in point order."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n)
    out = np.empty((n, values.shape[1]), dtype=np.float64)
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(ids, weights=values[:, c], minlength=n)
    return out


def trilinear(grid, origin, spacing, points):
    """Trilinearly interpolate a (gx, gy, gz, D) grid at ``points``.

    Points outside the grid are clamped to its boundary cells.
    """
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    shape = np.array(grid.shape[:3])
    u = (points - np.asarray(origin, dtype=np.float64)) / float(spacing)
    base = np.clip(np.floor(u).astype(np.int64), 0, shape - 2)
    t = np.clip(u - base, 0.0, 1.0)
    out = np.zeros((len(points), grid.shape[3]), dtype=np.float64)
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                w = wx * wy * wz
                out += w[:, None] * grid[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
    return out
