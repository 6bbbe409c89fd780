"""Point and superpoint feature extraction.

Two presets share one interface:

* ``toy``: per-point MLP with voxel-neighbourhood mean aggregation.
* ``paper``: a 3-level U-shaped encoder on sparse voxels (0.02 m base) built
  from submanifold 3x3x3 convolutions over hashed voxel neighbours.

Each encoder splits work into a numpy ``prepare`` step (index structures for
one sample, computed once) and a torch ``forward`` over a collated batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import kernels


class Index:
    """Integer ids into a table of ``count`` rows; -1 marks "no row"."""

    __slots__ = ("ids", "count")

    def __init__(self, ids, count):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.count = int(count)


def collate_indices(per_sample):
    """Concatenate per-sample ``Index`` fields, shifting ids by running counts."""
    out, base = [], 0
    for idx in per_sample:
        ids = idx.ids.copy()
        ids[ids >= 0] += base
        out.append(ids)
        base += idx.count
    return np.concatenate(out), base


def scatter_mean(x, ids, n):
    """Mean of rows of ``x`` grouped by ``ids``; summed in row order."""
    out = x.new_zeros((n, x.shape[1])).index_add_(0, ids, x)
    counts = torch.bincount(ids, minlength=n).clamp_min(1).to(x.dtype)
    return out / counts[:, None]


def superpoint_pool(point_features, superpoint, count):
    """Average point features per superpoint (the F -> F_sup step)."""
    if isinstance(point_features, torch.Tensor):
        ids = torch.as_tensor(superpoint, dtype=torch.long)
        if torch.bincount(ids, minlength=count).min() == 0:
            raise ValueError("superpoint with zero members")
        return scatter_mean(point_features, ids, count)
    return kernels.segment_mean(point_features, np.asarray(superpoint, dtype=np.int64), count)


def _mlp(dims, last_act=False):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or last_act:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ToyEncoder(nn.Module):
    def __init__(self, channels=32, in_dim=6, neighborhood=0.15):
        super().__init__()
        self.channels = channels
        self.neighborhood = neighborhood
        self.point_mlp = _mlp([in_dim, channels, channels], last_act=True)
        self.mix_mlp = _mlp([2 * channels, channels, channels])

    def prepare(self, centered):
        ids, keys = kernels.voxel_cluster(centered, self.neighborhood)
        return {"nb": Index(ids, len(keys))}

    def forward(self, feats, index):
        h = self.point_mlp(feats)
        nb, n = index["nb"]
        g = scatter_mean(h, nb, n)
        return self.mix_mlp(torch.cat([h, g[nb]], dim=1))


class SubmanifoldConv(nn.Module):
    """3x3x3 convolution evaluated only at occupied voxels."""

    def __init__(self, cin, cout):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(27 * cin, cout) * (2.0 / (27 * cin)) ** 0.5)
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x, nbr):
        pad = torch.cat([x, x.new_zeros((1, x.shape[1]))])
        nbr = torch.where(nbr < 0, torch.full_like(nbr, len(x)), nbr)
        return pad[nbr].reshape(len(x), -1) @ self.weight + self.bias


class ConvBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = SubmanifoldConv(c, c)
        self.conv2 = SubmanifoldConv(c, c)

    def forward(self, x, nbr):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x, nbr)), nbr))


class VoxelUNetEncoder(nn.Module):
    def __init__(self, channels=32, in_dim=6, voxel=0.02, levels=3):
        super().__init__()
        self.channels = channels
        self.voxel = voxel
        self.levels = levels
        self.stem = _mlp([in_dim, channels], last_act=True)
        self.down = nn.ModuleList([ConvBlock(channels) for _ in range(levels)])
        self.fuse = nn.ModuleList([nn.Linear(2 * channels, channels) for _ in range(levels - 1)])
        self.up = nn.ModuleList([ConvBlock(channels) for _ in range(levels - 1)])
        self.head = _mlp([2 * channels, channels, channels])

    def prepare(self, centered):
        out = {}
        prev = None
        for lvl in range(self.levels):
            ids, keys = kernels.voxel_cluster(centered, self.voxel * 2 ** lvl)
            out[f"nbr{lvl}"] = Index(kernels.neighbor_table(keys), len(keys))
            if lvl == 0:
                out["vox0"] = Index(ids, len(keys))
            else:
                parent = np.empty(prev[1], dtype=np.int64)
                parent[prev[0]] = ids
                out[f"parent{lvl}"] = Index(parent, len(keys))
            prev = (ids, len(keys))
        return out

    def forward(self, feats, index):
        p = self.stem(feats)
        vox0, n0 = index["vox0"]
        x = scatter_mean(p, vox0, n0)
        skips = []
        for lvl in range(self.levels):
            nbr, _ = index[f"nbr{lvl}"]
            if lvl:
                parent, n = index[f"parent{lvl}"]
                x = scatter_mean(x, parent, n)
            x = self.down[lvl](x, nbr)
            skips.append(x)
        for lvl in range(self.levels - 2, -1, -1):
            parent, _ = index[f"parent{lvl + 1}"]
            nbr, _ = index[f"nbr{lvl}"]
            x = torch.relu(self.fuse[lvl](torch.cat([skips[lvl], x[parent]], dim=1)))
            x = self.up[lvl](x, nbr)
        return self.head(torch.cat([x[vox0], p], dim=1))


PRESETS = {"toy": ToyEncoder, "paper": VoxelUNetEncoder}


def build_encoder(preset="toy", channels=32, **kw):
    if preset not in PRESETS:
        raise ValueError(f"unknown encoder preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset](channels=channels, **kw)


@dataclass
class FeatureSet:
    point_features: torch.Tensor
    superpoint_features: torch.Tensor
    region_split: tuple  # (rows of S1, rows of S2, rows of S3) into superpoint_features


def encoder_inputs(positions, colors):
    """(x, y, z, r, g, b) rows with coordinates centered on the sample centroid."""
    pos = np.asarray(positions, dtype=np.float64)
    centered = pos - pos.mean(axis=0)
    return np.concatenate([centered, np.asarray(colors, dtype=np.float64)], axis=1), centered
