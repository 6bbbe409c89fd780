"""Deterministic desk-scale indoor worlds with per-point ground truth.

Objects are unions of axis-aligned cuboids (plus a cylinder) sampled on their
visible surfaces. A configurable share of objects is placed in overlapping
pairs (chairs tucked under tables, bins and cabinets below table tops); all
other objects keep their boxes apart. The floor sits ``floor_offset`` below
the objects so floor points never fall inside a tight box.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import kernels
from .scene import BBox3D, PointCloud, Scene, SuperpointPartition, save_scene

TABLE, CHAIR, CABINET, BIN, SOFA = range(5)
CATEGORY_NAMES = ("table", "chair", "cabinet", "bin", "sofa")
CATEGORY_COLORS = np.array([
    [0.55, 0.36, 0.20],
    [0.78, 0.22, 0.20],
    [0.40, 0.46, 0.62],
    [0.22, 0.60, 0.30],
    [0.50, 0.30, 0.66],
])
FLOOR_COLOR = np.array([0.78, 0.76, 0.70])

# (host, guest, weight): guest slides partly under the host's top
PAIR_TYPES = ((TABLE, CHAIR, 0.7), (TABLE, BIN, 0.15), (TABLE, CABINET, 0.15))
LEG_CLEARANCE = 0.1  # table leg inset + width, rounded up


class PlacementError(RuntimeError):
    pass


@dataclass
class WorldConfig:
    num_scenes: int = 10
    objects_min: int = 5
    objects_max: int = 8
    overlap_fraction: float = 0.4
    point_density: float = 250.0
    points_min: int = 60
    points_max: int = 800
    floor_density: float = 100.0
    floor_offset: float = 0.03
    noise: float = 0.005
    color_noise: float = 0.03
    superpoint_size: float = 0.05
    collision_voxel: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("bad objects-per-scene range")

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        section = parser["world"] if parser.has_section("world") else parser.defaults()
        kwargs = {}
        for f in fields(cls):
            if f.name in section:
                kwargs[f.name] = type(f.default)(section[f.name])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# shapes: list of cuboid parts (lo, hi) in object frame, z from 0 upward


def _table(rng):
    w, d, h = rng.uniform(1.0, 1.4), rng.uniform(0.65, 0.9), rng.uniform(0.72, 0.78)
    parts = [((-w / 2, -d / 2, h - 0.04), (w / 2, d / 2, h))]
    leg, inset = 0.05, 0.03
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx, cy = sx * (w / 2 - inset - leg / 2), sy * (d / 2 - inset - leg / 2)
            parts.append(((cx - leg / 2, cy - leg / 2, 0.0), (cx + leg / 2, cy + leg / 2, h - 0.04)))
    return parts


def _chair(rng, back_side=None):
    w = d = rng.uniform(0.42, 0.5)
    seat, top = rng.uniform(0.42, 0.48), rng.uniform(0.82, 0.95)
    parts = [((-w / 2, -d / 2, seat - 0.04), (w / 2, d / 2, seat))]
    leg = 0.04
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx, cy = sx * (w / 2 - leg / 2), sy * (d / 2 - leg / 2)
            parts.append(((cx - leg / 2, cy - leg / 2, 0.0), (cx + leg / 2, cy + leg / 2, seat - 0.04)))
    side = rng.integers(4) if back_side is None else back_side
    t = 0.04
    back = {
        0: ((w / 2 - t, -d / 2, seat), (w / 2, d / 2, top)),
        1: ((-w / 2, -d / 2, seat), (-w / 2 + t, d / 2, top)),
        2: ((-w / 2, d / 2 - t, seat), (w / 2, d / 2, top)),
        3: ((-w / 2, -d / 2, seat), (w / 2, -d / 2 + t, top)),
    }[int(side)]
    parts.append(back)
    return parts


def _cabinet(rng):
    w, d, h = rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.5), rng.uniform(0.5, 0.62)
    return [((-w / 2, -d / 2, 0.0), (w / 2, d / 2, h))]


def _sofa(rng):
    w, d = rng.uniform(1.4, 2.0), rng.uniform(0.8, 0.95)
    seat, top, t = 0.4, rng.uniform(0.8, 0.9), 0.2
    side = rng.integers(4)
    parts = [((-w / 2, -d / 2, 0.0), (w / 2, d / 2, seat))]
    parts.append({
        0: ((-w / 2, d / 2 - t, seat), (w / 2, d / 2, top)),
        1: ((-w / 2, -d / 2, seat), (w / 2, -d / 2 + t, top)),
        2: ((w / 2 - t, -d / 2, seat), (w / 2, d / 2, top)),
        3: ((-w / 2, -d / 2, seat), (-w / 2 + t, d / 2, top)),
    }[int(side)])
    return parts


def _sample_cuboids(parts, cfg, rng):
    faces = []
    for lo, hi in parts:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        for axis in range(3):
            for end, val in ((0, lo[axis]), (1, hi[axis])):
                if axis == 2 and end == 0 and val <= 1e-9:
                    continue  # resting face, never scanned
                others = [i for i in range(3) if i != axis]
                area = np.prod(hi[others] - lo[others])
                faces.append((axis, val, lo, hi, others, area))
    areas = np.array([f[5] for f in faces])
    total = int(np.clip(round(areas.sum() * cfg.point_density), cfg.points_min, cfg.points_max))
    counts = rng.multinomial(total, areas / areas.sum())
    pts = []
    for (axis, val, lo, hi, others, _), c in zip(faces, counts):
        p = np.empty((c, 3))
        p[:, axis] = val
        for i in others:
            p[:, i] = rng.uniform(lo[i], hi[i], size=c)
        pts.append(p)
    pts = np.concatenate(pts)
    hidden = np.zeros(len(pts), dtype=bool)
    for lo, hi in parts:
        hidden |= np.all((pts > np.asarray(lo) + 1e-6) & (pts < np.asarray(hi) - 1e-6), axis=1)
    return pts[~hidden]


def _sample_cylinder(rng, cfg):
    r, h = rng.uniform(0.12, 0.18), rng.uniform(0.3, 0.45)
    side, top = 2 * np.pi * r * h, np.pi * r * r
    total = int(np.clip(round((side + top) * cfg.point_density), cfg.points_min, cfg.points_max))
    n_side = rng.binomial(total, side / (side + top))
    th = rng.uniform(0, 2 * np.pi, n_side)
    lateral = np.column_stack([r * np.cos(th), r * np.sin(th), rng.uniform(0, h, n_side)])
    rad = r * np.sqrt(rng.uniform(0, 1, total - n_side))
    th = rng.uniform(0, 2 * np.pi, total - n_side)
    cap = np.column_stack([rad * np.cos(th), rad * np.sin(th), np.full(total - n_side, h)])
    return np.concatenate([lateral, cap])


def make_object(category, cfg, rng, **kw):
    """Points (object frame, centered in XY, resting on z=0) and colors."""
    if category == BIN:
        pts = _sample_cylinder(rng, cfg)
    else:
        parts = {TABLE: _table, CHAIR: _chair, CABINET: _cabinet, SOFA: _sofa}[category](rng, **kw)
        pts = _sample_cuboids(parts, cfg, rng)
    pts = pts + rng.normal(0, cfg.noise, size=pts.shape)
    shade = CATEGORY_COLORS[category] + rng.normal(0, 0.05, size=3)
    cols = np.clip(shade + rng.normal(0, cfg.color_noise, size=pts.shape), 0, 1)
    return pts, cols


# ---------------------------------------------------------------------------
# placement


def _footprint(pts):
    return pts[:, :2].min(0), pts[:, :2].max(0)


def _boxes_clear(lo, hi, placed, clearance=0.05):
    for plo, phi in placed:
        if np.all(lo - clearance <= phi) and np.all(plo - clearance <= hi):
            return False
    return True


def _place_pair(cfg, rng, room, placed):
    weights = np.array([w for _, _, w in PAIR_TYPES])
    for _ in range(200):
        host_cat, guest_cat, _ = PAIR_TYPES[rng.choice(len(PAIR_TYPES), p=weights / weights.sum())]
        host, host_col = make_object(host_cat, cfg, rng)
        hlo, hhi = _footprint(host)
        side = rng.integers(4)
        axis, sign = side // 2, (1 if side % 2 == 0 else -1)
        # chair backs face away from the table
        kw = {"back_side": {(0, 1): 0, (0, -1): 1, (1, 1): 2, (1, -1): 3}[(axis, sign)]} if guest_cat == CHAIR else {}
        guest, guest_col = make_object(guest_cat, cfg, rng, **kw)
        glo, ghi = _footprint(guest)
        gsize = ghi[axis] - glo[axis]
        offset = np.zeros(2)
        edge = hhi[axis] if sign > 0 else hlo[axis]
        inward = rng.uniform(0.15, 0.6) * gsize
        center_along = edge - sign * inward + sign * gsize / 2
        other = 1 - axis
        offset[axis] = center_along - (glo[axis] + ghi[axis]) / 2
        # tucked guests sit between the host's legs along that side
        half = (ghi[other] - glo[other]) / 2
        lo_c, hi_c = hlo[other] + LEG_CLEARANCE + half, hhi[other] - LEG_CLEARANCE - half
        along = rng.uniform(lo_c, hi_c) if lo_c < hi_c else (hlo[other] + hhi[other]) / 2
        offset[other] = along - (glo[other] + ghi[other]) / 2
        guest = guest + np.array([offset[0], offset[1], 0.0])
        if kernels.co_occupied_voxels(host, guest, cfg.collision_voxel):
            continue
        bh, bg = BBox3D.tight(host, host_cat), BBox3D.tight(guest, guest_cat)
        if not (bh.contains(guest).any() or bg.contains(host).any()):
            continue
        both = np.concatenate([host, guest])
        lo, hi = _footprint(both)
        shift = rng.uniform(-room / 2 - lo + 0.1, room / 2 - hi - 0.1)
        if np.any(-room / 2 - lo + 0.1 > room / 2 - hi - 0.1):
            continue
        t = np.array([shift[0], shift[1], 0.0])
        if not _boxes_clear(lo + shift, hi + shift, placed):
            continue
        placed.append((lo + shift, hi + shift))
        return [(host + t, host_col, host_cat), (guest + t, guest_col, guest_cat)]
    raise PlacementError("could not place an overlapping pair without collision")


def _place_single(cfg, rng, room, placed):
    for _ in range(300):
        cat = int(rng.integers(len(CATEGORY_NAMES)))
        pts, col = make_object(cat, cfg, rng)
        lo, hi = _footprint(pts)
        low, high = -room / 2 - lo + 0.05, room / 2 - hi - 0.05
        if np.any(low > high):
            continue
        shift = rng.uniform(low, high)
        if not _boxes_clear(lo + shift, hi + shift, placed):
            continue
        placed.append((lo + shift, hi + shift))
        return pts + np.array([shift[0], shift[1], 0.0]), col, cat
    raise PlacementError("could not place an isolated object with disjoint boxes")


def generate_scene(cfg: WorldConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    x = cfg.overlap_fraction * n / 2
    pairs = min(int(x) + int(rng.random() < x - int(x)), n // 2)
    room = 2.2 * np.sqrt(n) + 1.0
    placed, objects = [], []
    for _ in range(pairs):
        objects.extend(_place_pair(cfg, rng, room, placed))
    for _ in range(n - 2 * pairs):
        objects.append(_place_single(cfg, rng, room, placed))
    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]

    n_floor = rng.poisson(cfg.floor_density * room * room)
    floor = np.column_stack([
        rng.uniform(-room / 2, room / 2, size=(n_floor, 2)),
        rng.normal(-cfg.floor_offset, cfg.noise / 2, size=n_floor),
    ])
    floor_col = np.clip(FLOOR_COLOR + rng.normal(0, cfg.color_noise, size=(n_floor, 3)), 0, 1)

    positions = np.concatenate([o[0] for o in objects] + [floor]).astype(np.float32)
    colors = np.concatenate([o[1] for o in objects] + [floor_col])
    gt = np.concatenate([np.full(len(o[0]), i) for i, o in enumerate(objects)] + [np.full(n_floor, -1)])
    boxes = [BBox3D.tight(positions[gt == i], o[2]) for i, o in enumerate(objects)]
    sp, _ = kernels.voxel_cluster(positions, cfg.superpoint_size)
    return Scene(PointCloud(positions, colors), boxes, SuperpointPartition(sp), gt,
                 scene_id=f"world{cfg.seed}_{index:04d}")


def generate_world(cfg: WorldConfig):
    return [generate_scene(cfg, i) for i in range(cfg.num_scenes)]


def overlap_fraction(scenes):
    """Share of objects whose box intersects some other box in its scene."""
    from .overlap import isolated_boxes

    total = sum(len(s.boxes) for s in scenes)
    isolated = sum(len(isolated_boxes(s.boxes)) for s in scenes)
    return (total - isolated) / max(total, 1)


def write_world(scenes, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in scenes:
        p = out / f"{s.scene_id}.npz"
        save_scene(s, p)
        paths.append(p)
    return paths
