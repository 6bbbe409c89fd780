"""Simulated overlap samples built from isolated objects.

Category-pair counts and center distances are harvested from real overlap
samples; new pairs are drawn from those statistics, pushed together along X or
Y, dropped onto a shared floor, checked for interpenetration and padded with
floor points. Accepted samples carry ground truth for every point.
"""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .overlap import (
    BACKGROUND, LABEL_A, LABEL_B, LABEL_BG, S3, BankObject, ObjectBank, OverlapSample,
    assign_regions, refine_superpoints,
)
from .scene import BBox3D

log = logging.getLogger(__name__)

AXES = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])


class ExhaustionError(RuntimeError):
    """No category pair in the statistics can be served by the object bank."""


@dataclass
class SimConfig:
    retry_limit: int = 8
    floor_point_rate: float = 400.0
    floor_margin: float = 0.2
    gravity_eps: float = 0.005
    collision_voxel: float = 0.03
    superpoint_size: float = 0.05
    floor_color: tuple = (0.78, 0.76, 0.7)
    gravity: bool = True
    collision: bool = True
    background: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.retry_limit < 1:
            raise ValueError("retry_limit must be >= 1")
        for name in ("floor_margin", "gravity_eps", "collision_voxel", "superpoint_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.floor_point_rate < 0:
            raise ValueError("floor_point_rate must be non-negative")


@dataclass(frozen=True)
class PairEntry:
    n: int
    mean: float
    std: float


class PairStats:
    """Per unordered category pair: sample count, center-distance mean and std."""

    def __init__(self, entries=None):
        self.entries = {}
        for key, e in (entries or {}).items():
            self.entries[self.key(*key)] = e

    @staticmethod
    def key(a, b):
        a, b = int(a), int(b)
        return (a, b) if a <= b else (b, a)

    def __getitem__(self, pair):
        return self.entries[self.key(*pair)]

    def __contains__(self, pair):
        return self.key(*pair) in self.entries

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, PairStats) and self.entries == other.entries

    def save(self, path):
        rows = [{"pair": list(k), "n": e.n, "mean": e.mean, "std": e.std}
                for k, e in sorted(self.entries.items())]
        Path(path).write_text(json.dumps({"format_version": "1", "pairs": rows}, indent=1))

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls({tuple(r["pair"]): PairEntry(int(r["n"]), float(r["mean"]), float(r["std"]))
                    for r in data["pairs"]})


def harvest_stats(samples) -> PairStats:
    dists = {}
    for s in samples:
        dists.setdefault(PairStats.key(*s.categories), []).append(s.center_distance)
    # statistics.mean/stdev work in exact rational arithmetic: results are order independent
    entries = {}
    for k, d in dists.items():
        std = statistics.stdev(d) if len(d) > 1 else 0.0
        entries[k] = PairEntry(len(d), float(statistics.mean(d)), float(std))
    return PairStats(entries)


def draw_distance(mean, std, rng, max_tries=1000):
    """Normal(mean, std) truncated to d > 0."""
    if std == 0:
        if mean <= 0:
            raise ValueError("non-positive distance with zero spread")
        return float(mean)
    for _ in range(max_tries):
        d = rng.normal(mean, std)
        if d > 0:
            return float(d)
    raise ValueError(f"cannot draw a positive distance from N({mean}, {std})")


def sample_pair(stats: PairStats, bank: ObjectBank, rng, max_redraws=100):
    """Draw (object a, object b, distance d, pair key) per the harvested stats."""
    if len(stats) == 0:
        raise ExhaustionError("empty pair statistics")
    keys = sorted(stats.entries)
    weights = np.array([stats.entries[k].n for k in keys], dtype=np.float64)
    by_cat = bank.by_category()
    for _ in range(max_redraws):
        key = keys[rng.choice(len(keys), p=weights / weights.sum())]
        if key[0] not in by_cat or key[1] not in by_cat:
            continue
        a = bank.objects[by_cat[key[0]][rng.integers(len(by_cat[key[0]]))]]
        b = bank.objects[by_cat[key[1]][rng.integers(len(by_cat[key[1]]))]]
        e = stats.entries[key]
        d = draw_distance(e.mean, e.std, rng)
        # keys are unordered; real pairs arrive in either slot order
        if rng.random() < 0.5:
            a, b = b, a
        return a, b, d, key
    raise ExhaustionError(f"no category pair satisfiable from the bank after {max_redraws} draws")


@dataclass
class Rejection:
    attempts: int
    reasons: list = field(default_factory=list)


def apply_gravity(pa, pb):
    """Translate both objects down so each rests on the joint minimum z."""
    floor = min(pa[:, 2].min(), pb[:, 2].min())
    pa = pa.copy()
    pb = pb.copy()
    pa[:, 2] -= pa[:, 2].min() - floor
    pb[:, 2] -= pb[:, 2].min() - floor
    return pa, pb, float(floor)


def resolve_collision(pa, pb, cfg: SimConfig) -> bool:
    """True when the objects are collision free at ``collision_voxel``."""
    return kernels.co_occupied_voxels(pa, pb, cfg.collision_voxel) == 0


def _floor_height(box_a, box_b, cfg):
    lo_a, lo_b = box_a.lo[2], box_b.lo[2]
    z = max(lo_a, lo_b) if abs(lo_a - lo_b) < cfg.gravity_eps else min(lo_a, lo_b)
    z32 = np.float32(z)
    if float(z32) < z:
        z32 = np.nextafter(z32, np.float32(np.inf))
    return float(z32)


def add_background(boxes, floor_z, cfg: SimConfig, rng):
    """Uniform floor points over the two dilated box footprints.

    Returns (positions, colors); the count is Poisson(rate * footprint area).
    """
    if not cfg.background or cfg.floor_point_rate == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    lo = np.array([b.lo[:2] - cfg.floor_margin for b in boxes])
    hi = np.array([b.hi[:2] + cfg.floor_margin for b in boxes])
    blo, bhi = lo.min(0), hi.max(0)
    n = rng.poisson(cfg.floor_point_rate * np.prod(bhi - blo))
    xy = rng.uniform(blo, bhi, size=(n, 2))
    keep = np.zeros(n, dtype=bool)
    for l, h in zip(lo, hi):
        keep |= np.all((xy >= l) & (xy <= h), axis=1)
    xy = xy[keep]
    pos = np.column_stack([xy, np.full(len(xy), floor_z)])
    col = np.clip(np.asarray(cfg.floor_color) + rng.normal(0, 0.03, size=(len(xy), 3)), 0, 1)
    return pos, col


def compose_sample(a: BankObject, b: BankObject, d: float, cfg: SimConfig, rng, redraw=None):
    """Place ``b`` at distance ``d`` from ``a``; retry up to ``cfg.retry_limit`` times.

    ``redraw`` supplies a fresh distance for every retry; without it the same
    distance is reused with a new axis. Returns an ``OverlapSample`` or a
    ``Rejection``.
    """
    if d < 0:
        raise ValueError("distance must be non-negative")
    reasons = []
    for attempt in range(cfg.retry_limit):
        if attempt and redraw is not None:
            d = redraw()
        pa = np.asarray(a.positions, dtype=np.float64) - a.box.center
        pb = np.asarray(b.positions, dtype=np.float64) - b.box.center
        pb = pb + d * AXES[rng.integers(4)]
        if cfg.gravity:
            pa, pb, _ = apply_gravity(pa, pb)
        # round once so boxes, regions and stored points agree exactly
        pa = pa.astype(np.float32).astype(np.float64)
        pb = pb.astype(np.float32).astype(np.float64)
        if cfg.collision and not resolve_collision(pa, pb, cfg):
            reasons.append("collision")
            continue
        box_a, box_b = BBox3D.tight(pa, a.category), BBox3D.tight(pb, b.category)
        pts = np.concatenate([pa, pb])
        if not np.any(assign_regions(pts, box_a, box_b) == S3):
            reasons.append("no_overlap")
            continue
        floor_z = _floor_height(box_a, box_b, cfg)
        fpos, fcol = add_background((box_a, box_b), floor_z, cfg, rng)
        positions = np.concatenate([pts, fpos])
        colors = np.concatenate([a.colors, b.colors, fcol])
        gt = np.concatenate([
            np.full(len(pa), LABEL_A), np.full(len(pb), LABEL_B), np.full(len(fpos), LABEL_BG),
        ]).astype(np.int8)
        positions32 = positions.astype(np.float32)
        region = assign_regions(positions32, box_a, box_b)
        # floor points count as background unless they sit in the overlap
        floor_rows = np.arange(len(region)) >= len(pts)
        region[floor_rows & (region != S3)] = BACKGROUND
        sp, _ = kernels.voxel_cluster(positions32, cfg.superpoint_size)
        return OverlapSample(
            positions32, colors, refine_superpoints(sp, region), region, (box_a, box_b),
            scene_id="sim", box_pair=(0, 1), gt_label=gt, floor_z=floor_z,
        )
    return Rejection(cfg.retry_limit, reasons)


@dataclass
class PlausibilityReport:
    floating_gap: float
    collision_voxels: int
    s3_points: int
    background_points: int
    floating_ok: bool
    collision_ok: bool
    s3_ok: bool
    background_ok: bool

    @property
    def ok(self):
        return self.floating_ok and self.collision_ok and self.s3_ok and self.background_ok


def verify_plausibility(sample: OverlapSample, cfg: SimConfig | None = None) -> PlausibilityReport:
    cfg = cfg or SimConfig()
    pos = sample.positions.astype(np.float64)
    pa, pb = pos[sample.gt_label == LABEL_A], pos[sample.gt_label == LABEL_B]
    floor = sample.floor_z if sample.floor_z is not None else min(pa[:, 2].min(), pb[:, 2].min())
    gap = max(abs(pa[:, 2].min() - floor), abs(pb[:, 2].min() - floor))
    hits = kernels.co_occupied_voxels(pa, pb, cfg.collision_voxel / 2)
    n3 = int(np.sum(sample.region == S3))
    nbg = int(np.sum(sample.gt_label == LABEL_BG))
    want_bg = cfg.background and cfg.floor_point_rate > 0
    return PlausibilityReport(
        floating_gap=float(gap), collision_voxels=hits, s3_points=n3, background_points=nbg,
        floating_ok=gap < cfg.gravity_eps, collision_ok=hits == 0, s3_ok=n3 > 0,
        background_ok=(nbg > 0) or not want_bg,
    )


def generate_corpus(stats: PairStats, bank: ObjectBank, count: int, cfg: SimConfig, max_draw_factor=50):
    """Generate ``count`` accepted samples; draw ``i`` uses the stream (seed, i).

    Returns (samples, manifest).
    """
    samples, reasons = [], {"collision": 0, "no_overlap": 0}
    rejected = draws = 0
    while len(samples) < count:
        if draws >= max_draw_factor * max(count, 1):
            raise ExhaustionError(f"only {len(samples)} of {count} samples accepted after {draws} draws")
        rng = np.random.default_rng([cfg.rng_seed, draws])
        draws += 1
        a, b, d, key = sample_pair(stats, bank, rng)
        e = stats.entries[key]
        out = compose_sample(a, b, d, cfg, rng, redraw=lambda: draw_distance(e.mean, e.std, rng))
        if isinstance(out, Rejection):
            rejected += 1
            for r in out.reasons:
                reasons[r] = reasons.get(r, 0) + 1
            continue
        samples.append(out)
    manifest = {
        "requested": count, "accepted": len(samples), "draws": draws, "rejected_pairs": rejected,
        "failed_attempts": reasons, "config": {k: v for k, v in asdict(cfg).items()},
    }
    log.info("simulated %d samples from %d draws (%d pairs rejected)", len(samples), draws, rejected)
    return samples, manifest
