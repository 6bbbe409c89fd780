"""Pseudo-label quality in overlap areas, scene-level label fusion, and reports."""
from __future__ import annotations

import json
import statistics
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .labeler import Labeler, point_labels, predict_logits, prepare
from .overlap import LABEL_A, LABEL_B, LABEL_BG, S3, OverlapSample, smaller_box_assign
from .scene import PseudoLabelSet, Scene


@dataclass
class MAccReport:
    per_sample: list            # accuracy of each counted sample, in input order
    macc: float
    excluded: list = field(default_factory=list)   # input indices skipped for empty S3
    method: str = ""
    breakdown: dict = field(default_factory=dict)


def compute_macc(predictions, gt, binary=False, method=""):
    """Mean over samples of the fraction of S3 points whose label matches GT.

    ``predictions`` and ``gt`` are per-sample arrays of {A, B, BG} labels over
    the same S3 points. Samples are weighted equally regardless of size.
    With ``binary`` only points whose GT is A or B are scored.
    """
    if len(predictions) != len(gt):
        raise ValueError(f"{len(predictions)} predictions for {len(gt)} ground-truth samples")
    accs, excluded = [], []
    for i, (p, g) in enumerate(zip(predictions, gt)):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"sample {i}: prediction shape {p.shape} != ground truth {g.shape}")
        if binary:
            keep = g != LABEL_BG
            p, g = p[keep], g[keep]
        if g.size == 0:
            excluded.append(i)
            continue
        accs.append(float(np.mean(p == g)))
    if excluded:
        warnings.warn(f"{len(excluded)} sample(s) with empty S3 excluded from mAcc", RuntimeWarning, stacklevel=2)
    # exact rational mean, correctly rounded: independent of sample order
    macc = float(statistics.mean(accs)) if accs else float("nan")
    return MAccReport(accs, macc, excluded, method)


def ground_truth(samples):
    out = []
    for s in samples:
        if s.gt_label is None:
            raise ValueError(f"sample from {s.scene_id} {s.box_pair} has no ground truth")
        out.append(s.gt_region3)
    return out


# -- methods: each maps a list of samples to per-sample S3 label arrays ------

def smaller_box_predictions(samples):
    return [smaller_box_assign(s) for s in samples]


def majority_predictions(samples):
    """Oracle baseline: every S3 point gets the sample's most frequent GT label."""
    out = []
    for g in ground_truth(samples):
        label = np.bincount(g, minlength=3).argmax() if len(g) else LABEL_BG
        out.append(np.full(len(g), label, dtype=np.int8))
    return out


def labeler_predictions(model: Labeler, samples, batch_size=32):
    prepared = [prepare(s, model.encoder, use_gt_targets=False) for s in samples]
    logits = predict_logits(model, prepared, batch_size)
    return [point_labels(p, lg) for p, lg in zip(prepared, logits)]


def labeler_method(model, batch_size=32):
    return lambda samples: labeler_predictions(model, samples, batch_size)


def evaluate(model: Labeler, samples, binary=False):
    return compute_macc(labeler_predictions(model, samples), ground_truth(samples), binary).macc


# -- scene fusion ------------------------------------------------------------

def label_scene(scene: Scene, samples, model: Labeler) -> PseudoLabelSet:
    """Scene-level soft masks: determinate box membership plus labeler output.

    Points inside exactly one box get 1.0 for it. Overlap points get the
    labeler's sigmoid confidences; the non-chosen instance is capped at 0.5
    so at most one of the pair exceeds the threshold, and background
    decisions give 0.0 to both. Points shared by several pairs keep the
    maximum confidence per instance.
    """
    inside = scene.membership()
    n, k = inside.shape
    count = inside.sum(axis=1)
    masks = np.zeros((k, n), dtype=np.float32)
    single = count == 1
    masks[:, single] = inside[single].T
    determinate = ~(inside.T & (count >= 2)[None, :])
    pairs = set()
    for s in samples:
        _check_sample(scene, s, inside)
        pairs.add(s.box_pair)
    expected = {(a, b) for a in range(k) for b in range(a + 1, k) if np.any(inside[:, a] & inside[:, b])}
    if pairs != expected:
        raise ValueError(f"{scene.scene_id}: samples cover pairs {sorted(pairs)}, scene has {sorted(expected)}")
    if samples:
        prepared = [prepare(s, model.encoder, use_gt_targets=False) for s in samples]
        for s, p, lg in zip(samples, prepared, predict_logits(model, prepared)):
            prob = 1.0 / (1.0 + np.exp(-lg[:, p.s3_point_token]))
            labels = point_labels(p, lg)
            conf = np.zeros_like(prob)
            a_win, b_win = labels == LABEL_A, labels == LABEL_B
            conf[0, a_win], conf[1, a_win] = prob[0, a_win], np.minimum(prob[1, a_win], 0.5)
            conf[1, b_win], conf[0, b_win] = prob[1, b_win], np.minimum(prob[0, b_win], 0.5)
            idx = s.scene_indices(s.region_s3)
            for row, box in enumerate(s.box_pair):
                masks[box, idx] = np.maximum(masks[box, idx], conf[row].astype(np.float32))
    cats = np.array([b.category for b in scene.boxes], dtype=np.int64)
    return PseudoLabelSet(masks, determinate, cats, scene.scene_id)


def _check_sample(scene, s: OverlapSample, inside):
    if s.scene_id != scene.scene_id:
        raise ValueError(f"sample from {s.scene_id!r} given for scene {scene.scene_id!r}")
    a, b = s.box_pair
    if s.source_index is None or not (0 <= a < b < inside.shape[1]):
        raise ValueError(f"{scene.scene_id}: sample {s.box_pair} does not index this scene")
    if s.source_index.size and s.source_index.max() >= len(scene):
        raise ValueError(f"{scene.scene_id}: sample {s.box_pair} indexes points beyond the scene")
    idx = s.scene_indices(s.region_s3)
    if not np.all(inside[idx, a] & inside[idx, b]):
        raise ValueError(f"{scene.scene_id}: sample {s.box_pair} overlap points are not in both boxes")


# -- benchmark table ---------------------------------------------------------

@dataclass
class BenchmarkTable:
    rows: list      # (method, MAccReport)
    num_samples: int

    def to_dict(self):
        return {
            "num_samples": self.num_samples,
            "rows": [{"method": m, "macc": r.macc, "per_sample": r.per_sample, "excluded": r.excluded}
                     for m, r in self.rows],
        }

    def to_text(self):
        width = max([len("Method")] + [len(m) for m, _ in self.rows])
        lines = [f"{'Method':<{width}}  mAcc (%)", "-" * (width + 10)]
        lines += [f"{m:<{width}}  {100 * r.macc:8.2f}" for m, r in self.rows]
        lines.append(f"({self.num_samples} overlap samples)")
        return "\n".join(lines)

    def macc(self, method):
        for m, r in self.rows:
            if m == method:
                return r.macc
        raise KeyError(method)

    def write(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".txt").write_text(self.to_text() + "\n")
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def run_benchmark(methods, samples, binary=False):
    """``methods`` maps a row name to a callable returning S3 predictions."""
    gt = ground_truth(samples)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name, fn in methods.items():
            rows.append((name, compute_macc(fn(samples), gt, binary, method=name)))
    return BenchmarkTable(rows, len(samples))


# -- plots -------------------------------------------------------------------

def _pyplot():
    try:
        import matplotlib
    except ImportError as e:
        raise RuntimeError("plotting needs matplotlib (pip install boxpseudo[plot])") from e
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(records, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for phase in sorted({r["phase"] for r in records}):
        rs = [r for r in records if r["phase"] == phase]
        ax.plot([r["step"] for r in rs], [r["loss"] for r in rs], label=phase)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_macc(table: BenchmarkTable, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [m for m, _ in table.rows]
    ax.bar(names, [100 * r.macc for _, r in table.rows])
    ax.set_ylabel("mAcc (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
