"""Geometry kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``BOXPSEUDO_PURE_PYTHON=1``
to force the numpy versions. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("BOXPSEUDO_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python forced")
    from . import _ckernels as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

points_in_boxes = _impl.points_in_boxes
voxel_keys = _impl.voxel_keys
neighbor_table = _impl.neighbor_table
segment_sum = _impl.segment_sum
trilinear = _impl.trilinear


def backends():
    """Map of available backend name -> module, for tests and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["compiled"] = _ckernels
    except ImportError:
        pass
    return out


def voxel_cluster(points, size):
    """Group points by voxel; ids follow sorted voxel-key order.

    Returns ``(ids, keys)`` where ``keys`` are the unique sorted voxel keys.
    """
    keys, ids = np.unique(voxel_keys(points, size), return_inverse=True)
    return ids.astype(np.int64), keys


def segment_mean(values, ids, n):
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment with no members")
    sums = segment_sum(values, ids, n)
    return sums / (counts if sums.ndim == 1 else counts[:, None])


def co_occupied_voxels(points_a, points_b, size):
    """Number of voxels holding points from both clouds."""
    if len(points_a) == 0 or len(points_b) == 0:
        return 0
    ka = np.unique(voxel_keys(points_a, size))
    kb = np.unique(voxel_keys(points_b, size))
    return int(len(np.intersect1d(ka, kb, assume_unique=True)))
