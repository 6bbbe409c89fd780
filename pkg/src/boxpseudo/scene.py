"""Scenes, boxes, superpoints and label sets, plus their on-disk containers.

Containers are ``.npz`` archives of plain arrays with a JSON ``meta`` string,
so any language with a zip + npy reader can open them.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

FORMAT_VERSION = "1"


class FormatError(ValueError):
    """A container file is missing a field or has the wrong shape/type."""


class ValidationError(ValueError):
    """Values violate a type invariant (NaN coordinates, bad ids, ...)."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.positions, np.float32).reshape(-1, 3)
        col = _frozen(self.colors, np.float32).reshape(-1, 3)
        if len(pos) < 1:
            raise ValidationError("point cloud needs at least one point")
        if len(pos) != len(col):
            raise ValidationError(f"positions ({len(pos)}) and colors ({len(col)}) differ in length")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("positions contain non-finite values")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class BBox3D:
    center: np.ndarray
    dims: np.ndarray
    category: int

    def __post_init__(self):
        # float32-representable so that file round trips are exact
        c = _frozen(np.asarray(self.center, dtype=np.float32), np.float64).reshape(3)
        d = _frozen(np.asarray(self.dims, dtype=np.float32), np.float64).reshape(3)
        if not np.all(d > 0):
            raise ValidationError(f"box dims must be positive, got {d.tolist()}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "category", int(self.category))

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def lo(self):
        return self.center - self.dims / 2

    @property
    def hi(self):
        return self.center + self.dims / 2

    def contains(self, points):
        return kernels.points_in_boxes(np.atleast_2d(points), self.center[None], self.dims[None])[:, 0]

    def intersects(self, other: "BBox3D") -> bool:
        """Closed box-level intersection (touching faces count)."""
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    @classmethod
    def tight(cls, points, category):
        """Smallest float32 box containing ``points`` (zero extents padded)."""
        points = np.asarray(points, dtype=np.float64)
        lo, hi = points.min(0), points.max(0)
        center = ((lo + hi) / 2).astype(np.float32)
        dims = np.maximum(hi - lo, 1e-6).astype(np.float32)
        while True:
            box = cls(center, dims, category)
            if box.contains(points).all():
                return box
            dims = np.nextafter(dims, np.float32(np.inf), dtype=np.float32)


@dataclass(frozen=True)
class SuperpointPartition:
    assignment: np.ndarray

    def __post_init__(self):
        a = _frozen(self.assignment, np.int64).reshape(-1)
        if len(a) and a.min() < 0:
            raise ValidationError("negative superpoint id")
        n = int(a.max()) + 1 if len(a) else 0
        if len(a) and np.any(np.bincount(a, minlength=n) == 0):
            raise ValidationError("superpoint ids must be dense: every id in [0, P) needs a member")
        object.__setattr__(self, "assignment", a)

    @property
    def count(self) -> int:
        return int(self.assignment.max()) + 1 if len(self.assignment) else 0

    @classmethod
    def from_voxels(cls, positions, size=0.05):
        ids, _ = kernels.voxel_cluster(positions, size)
        return cls(ids)


def boxes_arrays(boxes):
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return (
        np.stack([b.center for b in boxes]),
        np.stack([b.dims for b in boxes]),
        np.array([b.category for b in boxes], dtype=np.int64),
    )


@dataclass(frozen=True)
class Scene:
    cloud: PointCloud
    boxes: tuple
    superpoints: SuperpointPartition
    gt_instance: np.ndarray | None = None
    scene_id: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        n = len(self.cloud)
        if len(self.superpoints.assignment) != n:
            raise ValidationError("superpoint assignment length differs from point count")
        if self.gt_instance is not None:
            gt = _frozen(self.gt_instance, np.int64).reshape(-1)
            if len(gt) != n:
                raise ValidationError("gt_instance length differs from point count")
            if np.any((gt < -1) | (gt >= len(self.boxes))):
                raise ValidationError("gt_instance values must lie in {-1} U [0, K)")
            object.__setattr__(self, "gt_instance", gt)

    def __len__(self):
        return len(self.cloud)

    def membership(self):
        """Boolean (N, K) point-in-box matrix under the closed-boundary rule."""
        centers, dims, _ = boxes_arrays(self.boxes)
        return kernels.points_in_boxes(self.cloud.positions, centers, dims)


@dataclass(frozen=True)
class PseudoLabelSet:
    masks: np.ndarray
    determinate: np.ndarray
    categories: np.ndarray
    scene_id: str = "scene"

    def __post_init__(self):
        m = _frozen(self.masks, np.float32)
        d = _frozen(self.determinate, bool)
        c = _frozen(self.categories, np.int64).reshape(-1)
        if m.ndim != 2 or m.shape != d.shape or m.shape[0] != len(c):
            raise ValidationError(f"inconsistent label shapes {m.shape}, {d.shape}, {c.shape}")
        if np.any((m < 0) | (m > 1)) or not np.all(np.isfinite(m)):
            raise ValidationError("mask values must lie in [0, 1]")
        if np.any(d & (m != 0) & (m != 1)):
            raise ValidationError("determinate entries must be exactly 0 or 1")
        object.__setattr__(self, "masks", m)
        object.__setattr__(self, "determinate", d)
        object.__setattr__(self, "categories", c)


# ---------------------------------------------------------------------------
# containers


def _meta_array(meta: dict):
    return np.array(json.dumps(meta, sort_keys=True))


def read_container(path):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: not a readable array container ({exc})") from exc
    if "meta" not in arrays:
        raise FormatError(f"{path}: missing field 'meta'")
    try:
        meta = json.loads(str(arrays.pop("meta")))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: field 'meta' is not JSON") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: field 'meta.format_version' must be {FORMAT_VERSION!r}")
    return arrays, meta


def write_container(path, arrays: dict, meta: dict):
    path = Path(path)
    meta = dict(meta, format_version=FORMAT_VERSION)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            np.savez(fh, meta=_meta_array(meta), **arrays)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def _field(arrays, name, path, dtype, shape_tail=None, rows=None):
    if name not in arrays:
        raise FormatError(f"{path}: missing field {name!r}")
    a = arrays[name]
    if a.dtype.kind not in np.dtype(dtype).kind and not (a.dtype.kind in "iu" and np.dtype(dtype).kind in "iu"):
        raise FormatError(f"{path}: field {name!r} has dtype {a.dtype}, expected {np.dtype(dtype)}")
    if shape_tail is not None and (a.ndim != 1 + len(shape_tail) or tuple(a.shape[1:]) != shape_tail):
        raise FormatError(f"{path}: field {name!r} has shape {a.shape}, expected (*, {', '.join(map(str, shape_tail))})")
    if shape_tail is None and a.ndim != 1:
        raise FormatError(f"{path}: field {name!r} must be one-dimensional")
    if rows is not None and len(a) != rows:
        raise FormatError(f"{path}: field {name!r} has {len(a)} rows, expected {rows}")
    return a.astype(dtype)


def load_scene(path) -> Scene:
    arrays, meta = read_container(path)
    pos = _field(arrays, "positions", path, np.float32, (3,))
    n = len(pos)
    col = _field(arrays, "colors", path, np.float32, (3,), n)
    sp = _field(arrays, "superpoint", path, np.int64, None, n)
    centers = _field(arrays, "box_center", path, np.float32, (3,))
    k = len(centers)
    dims = _field(arrays, "box_dims", path, np.float32, (3,), k)
    cats = _field(arrays, "box_category", path, np.int64, None, k)
    gt = _field(arrays, "gt_instance", path, np.int64, None, n) if "gt_instance" in arrays else None
    if not np.all(np.isfinite(pos)):
        raise ValidationError(f"{path}: positions contain NaN or infinite coordinates")
    boxes = [BBox3D(c, d, int(cat)) for c, d, cat in zip(centers, dims, cats)]
    return Scene(
        PointCloud(pos, col), boxes, SuperpointPartition(sp), gt,
        scene_id=str(meta.get("scene_id", Path(path).stem)),
    )


def save_scene(scene: Scene, path):
    centers, dims, cats = boxes_arrays(scene.boxes)
    arrays = {
        "positions": scene.cloud.positions.astype(np.float32),
        "colors": scene.cloud.colors.astype(np.float32),
        "superpoint": scene.superpoints.assignment.astype(np.int32),
        "box_center": centers.astype(np.float32).reshape(-1, 3),
        "box_dims": dims.astype(np.float32).reshape(-1, 3),
        "box_category": cats.astype(np.int32),
    }
    if scene.gt_instance is not None:
        arrays["gt_instance"] = scene.gt_instance.astype(np.int32)
    write_container(path, arrays, {"scene_id": scene.scene_id, "kind": "scene"})


def save_labels(labels: PseudoLabelSet, path):
    arrays = {
        "masks": labels.masks.astype(np.float32),
        "determinate": labels.determinate.astype(np.uint8),
        "categories": labels.categories.astype(np.int32),
    }
    write_container(path, arrays, {"scene_id": labels.scene_id, "kind": "labels"})


def load_labels(path) -> PseudoLabelSet:
    arrays, meta = read_container(path)
    for name in ("masks", "determinate", "categories"):
        if name not in arrays:
            raise FormatError(f"{path}: missing field {name!r}")
    masks = arrays["masks"].astype(np.float32)
    if masks.ndim != 2:
        raise FormatError(f"{path}: field 'masks' must be K x N")
    return PseudoLabelSet(
        masks, arrays["determinate"].astype(bool), arrays["categories"].astype(np.int64),
        scene_id=str(meta.get("scene_id", "")),
    )
