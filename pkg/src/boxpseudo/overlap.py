"""Overlap samples and the non-overlapping object bank.

An overlap sample is the crop around a pair of intersecting boxes with every
point tagged by region: S1 (only in box a), S2 (only in box b), S3 (in both,
label indeterminate) or background (in neither, kept as context).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .scene import BBox3D, FormatError, Scene, boxes_arrays, read_container, write_container

S1, S2, S3, BACKGROUND = 0, 1, 2, 3
LABEL_A, LABEL_B, LABEL_BG = 0, 1, 2
LABEL_NAMES = ("A", "B", "BG")


def refine_superpoints(superpoint, region):
    """Split superpoints so that none straddles two regions; dense new ids."""
    key = np.asarray(superpoint, dtype=np.int64) * 4 + np.asarray(region, dtype=np.int64)
    _, ids = np.unique(key, return_inverse=True)
    return ids.astype(np.int64)


def assign_regions(positions, box_a: BBox3D, box_b: BBox3D):
    centers, dims, _ = boxes_arrays([box_a, box_b])
    inside = kernels.points_in_boxes(positions, centers, dims)
    region = np.full(len(positions), BACKGROUND, dtype=np.int8)
    region[inside[:, 0] & ~inside[:, 1]] = S1
    region[~inside[:, 0] & inside[:, 1]] = S2
    region[inside[:, 0] & inside[:, 1]] = S3
    return region


@dataclass(frozen=True)
class OverlapSample:
    positions: np.ndarray
    colors: np.ndarray
    superpoint: np.ndarray
    region: np.ndarray
    boxes: tuple
    scene_id: str = "sim"
    box_pair: tuple = (0, 1)
    source_index: np.ndarray | None = None
    gt_label: np.ndarray | None = None
    floor_z: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float32))
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float32))
        object.__setattr__(self, "superpoint", np.asarray(self.superpoint, dtype=np.int64))
        object.__setattr__(self, "region", np.asarray(self.region, dtype=np.int8))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "box_pair", tuple(int(i) for i in self.box_pair))
        if self.gt_label is not None:
            object.__setattr__(self, "gt_label", np.asarray(self.gt_label, dtype=np.int8))

    def __len__(self):
        return len(self.positions)

    def _where(self, r):
        return np.flatnonzero(self.region == r)

    @property
    def region_s1(self):
        return self._where(S1)

    @property
    def region_s2(self):
        return self._where(S2)

    @property
    def region_s3(self):
        return self._where(S3)

    @property
    def background_pts(self):
        return self._where(BACKGROUND)

    @property
    def gt_region3(self):
        return None if self.gt_label is None else self.gt_label[self.region == S3]

    @property
    def categories(self):
        return (self.boxes[0].category, self.boxes[1].category)

    @property
    def center_distance(self) -> float:
        return math.dist(self.boxes[0].center.tolist(), self.boxes[1].center.tolist())

    def scene_indices(self, local):
        if self.source_index is None:
            raise ValueError("sample has no source scene")
        return self.source_index[local]


def extract_overlap_samples(scene: Scene, margin: float = 0.1):
    """One sample per unordered box pair sharing at least one point."""
    inside = scene.membership()
    pos = scene.cloud.positions
    centers, dims, _ = boxes_arrays(scene.boxes)
    k = len(scene.boxes)
    samples = []
    for a in range(k):
        for b in range(a + 1, k):
            both = inside[:, a] & inside[:, b]
            if not both.any():
                continue
            grown = kernels.points_in_boxes(pos, centers[[a, b]], dims[[a, b]] + 2 * margin)
            crop = np.flatnonzero(grown.any(axis=1) | inside[:, a] | inside[:, b])
            region = np.full(len(crop), BACKGROUND, dtype=np.int8)
            ia, ib = inside[crop, a], inside[crop, b]
            region[ia & ~ib] = S1
            region[~ia & ib] = S2
            region[ia & ib] = S3
            gt = None
            if scene.gt_instance is not None:
                g = scene.gt_instance[crop]
                gt = np.full(len(crop), LABEL_BG, dtype=np.int8)
                gt[g == a] = LABEL_A
                gt[g == b] = LABEL_B
            samples.append(OverlapSample(
                positions=pos[crop], colors=scene.cloud.colors[crop],
                superpoint=refine_superpoints(scene.superpoints.assignment[crop], region),
                region=region, boxes=(scene.boxes[a], scene.boxes[b]),
                scene_id=scene.scene_id, box_pair=(a, b), source_index=crop, gt_label=gt,
            ))
    return samples


def smaller_box_assign(sample: OverlapSample, scene: Scene | None = None):
    """Baseline: every S3 point goes to the smaller-volume box (ties -> a)."""
    a, b = sample.boxes
    label = LABEL_A if a.volume <= b.volume else LABEL_B
    return np.full(len(sample.region_s3), label, dtype=np.int8)


# ---------------------------------------------------------------------------
# object bank


@dataclass(frozen=True)
class BankObject:
    positions: np.ndarray
    colors: np.ndarray
    category: int
    box: BBox3D
    source: str = ""


class ObjectBank:
    def __init__(self, objects=()):
        self.objects = list(objects)

    def __len__(self):
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)

    def by_category(self):
        out = {}
        for i, obj in enumerate(self.objects):
            out.setdefault(obj.category, []).append(i)
        return out

    def save(self, path):
        objs = self.objects
        counts = np.array([len(o.positions) for o in objs], dtype=np.int64)
        arrays = {
            "positions": np.concatenate([o.positions for o in objs]).astype(np.float32) if objs else np.zeros((0, 3), np.float32),
            "colors": np.concatenate([o.colors for o in objs]).astype(np.float32) if objs else np.zeros((0, 3), np.float32),
            "offsets": np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
            "category": np.array([o.category for o in objs], dtype=np.int32),
            "box_center": np.array([o.box.center for o in objs], dtype=np.float32).reshape(-1, 3),
            "box_dims": np.array([o.box.dims for o in objs], dtype=np.float32).reshape(-1, 3),
        }
        write_container(path, arrays, {"kind": "bank", "sources": [o.source for o in objs]})

    @classmethod
    def load(cls, path):
        arrays, meta = read_container(path)
        for name in ("positions", "colors", "offsets", "category", "box_center", "box_dims"):
            if name not in arrays:
                raise FormatError(f"{path}: missing field {name!r}")
        off = arrays["offsets"]
        sources = meta.get("sources", [""] * len(arrays["category"]))
        objs = []
        for i, cat in enumerate(arrays["category"]):
            sl = slice(off[i], off[i + 1])
            objs.append(BankObject(
                arrays["positions"][sl], arrays["colors"][sl], int(cat),
                BBox3D(arrays["box_center"][i], arrays["box_dims"][i], int(cat)), sources[i],
            ))
        return cls(objs)


def isolated_boxes(boxes):
    """Indices of boxes that intersect no other box (closed box-level test)."""
    centers, dims, _ = boxes_arrays(boxes)
    lo, hi = centers - dims / 2, centers + dims / 2
    hit = np.all((lo[:, None] <= hi[None]) & (lo[None] <= hi[:, None]), axis=2)
    np.fill_diagonal(hit, False)
    return np.flatnonzero(~hit.any(axis=1))


def extract_object_bank(scenes) -> ObjectBank:
    objs = []
    for scene in scenes:
        if not scene.boxes:
            continue
        inside = scene.membership()
        for k in isolated_boxes(scene.boxes):
            idx = np.flatnonzero(inside[:, k])
            if len(idx) == 0:
                continue
            pts = scene.cloud.positions[idx]
            cat = scene.boxes[k].category
            objs.append(BankObject(pts, scene.cloud.colors[idx], cat, BBox3D.tight(pts, cat),
                                   f"{scene.scene_id}:{k}"))
    return ObjectBank(objs)


# ---------------------------------------------------------------------------
# sample containers


def save_sample(sample: OverlapSample, path):
    centers, dims, cats = boxes_arrays(sample.boxes)
    arrays = {
        "positions": sample.positions.astype(np.float32),
        "colors": sample.colors.astype(np.float32),
        "superpoint": sample.superpoint.astype(np.int32),
        "region": sample.region.astype(np.int8),
        "box_center": centers.astype(np.float32),
        "box_dims": dims.astype(np.float32),
        "box_category": cats.astype(np.int32),
    }
    if sample.source_index is not None:
        arrays["source_index"] = sample.source_index.astype(np.int64)
    if sample.gt_label is not None:
        arrays["gt_label"] = sample.gt_label.astype(np.int8)
    meta = {"kind": "overlap_sample", "scene_id": sample.scene_id, "box_pair": list(sample.box_pair)}
    if sample.floor_z is not None:
        meta["floor_z"] = float(sample.floor_z)
    write_container(path, arrays, meta)


def load_sample(path) -> OverlapSample:
    arrays, meta = read_container(path)
    for name in ("positions", "colors", "superpoint", "region", "box_center", "box_dims", "box_category"):
        if name not in arrays:
            raise FormatError(f"{path}: missing field {name!r}")
    boxes = tuple(BBox3D(c, d, int(k)) for c, d, k in
                  zip(arrays["box_center"], arrays["box_dims"], arrays["box_category"]))
    if len(boxes) != 2:
        raise FormatError(f"{path}: field 'box_center' must hold exactly two boxes")
    return OverlapSample(
        arrays["positions"], arrays["colors"], arrays["superpoint"].astype(np.int64), arrays["region"],
        boxes, scene_id=meta.get("scene_id", Path(path).stem), box_pair=tuple(meta.get("box_pair", (0, 1))),
        source_index=arrays.get("source_index"), gt_label=arrays.get("gt_label"), floor_z=meta.get("floor_z"),
    )


def load_sample_dir(directory):
    return [load_sample(p) for p in sorted(Path(directory).glob("*.npz"))]
