"""The overlap labeler: encoder + local-global decoder, and its batching.

``prepare`` turns an ``OverlapSample`` into numpy index structures once;
``collate`` stacks prepared samples into a padded batch; ``Labeler.forward``
returns per-token mask logits in the padded layout.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .decoder import GROUP_1, GROUP_2, GROUP_3, GROUP_PAD, LGADecoder, resolve_labels
from .encoder import FeatureSet, Index, build_encoder, collate_indices, encoder_inputs, superpoint_pool
from .overlap import LABEL_A, LABEL_B, S1, S2, S3, OverlapSample


@dataclass
class LabelerConfig:
    preset: str = "toy"
    channels: int = 32
    num_categories: int = 5
    heads: int = 1
    local_layers: int = 1
    global_layers: int = 1
    rounds: int = 1
    neighborhood: float = 0.15
    voxel: float = 0.02

    def encoder_kwargs(self):
        if self.preset == "toy":
            return {"neighborhood": self.neighborhood}
        return {"voxel": self.voxel}

    def digest(self):
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


class Labeler(nn.Module):
    def __init__(self, cfg: LabelerConfig | None = None):
        super().__init__()
        self.cfg = cfg or LabelerConfig()
        self.encoder = build_encoder(self.cfg.preset, self.cfg.channels, **self.cfg.encoder_kwargs())
        self.decoder = LGADecoder(self.cfg.channels, self.cfg.num_categories, self.cfg.heads,
                                  self.cfg.local_layers, self.cfg.global_layers, self.cfg.rounds)

    def forward(self, batch: "Batch"):
        f = self.encoder(batch.feats, batch.enc_index)
        f_sup = superpoint_pool(f, batch.superpoint, batch.n_superpoints)
        return self.decoder(f_sup, batch.token_index, batch.groups)

    def encode(self, prepared: "Prepared") -> FeatureSet:
        batch = collate([prepared])
        f = self.encoder(batch.feats, batch.enc_index)
        f_sup = superpoint_pool(f, batch.superpoint, batch.n_superpoints)
        return FeatureSet(f, f_sup, prepared.region_rows())


@dataclass
class Prepared:
    feats: np.ndarray
    enc_index: dict
    superpoint: np.ndarray
    n_superpoints: int
    tokens: np.ndarray          # superpoint ids in S1, S2, S3 order
    token_region: np.ndarray
    categories: np.ndarray
    targets: np.ndarray | None  # (2, T) soft ownership, when ground truth exists
    s3_point_token: np.ndarray  # per S3 point: column among S3 tokens
    gt_s3: np.ndarray | None

    @property
    def n_s3(self):
        return int(np.sum(self.token_region == S3))

    def region_rows(self):
        return tuple(self.tokens[self.token_region == r] for r in (S1, S2, S3))

    def layout(self):
        """Token index row with -1/-2 at the query slots, and group tags."""
        s1, s2, s3 = self.region_rows()
        idx = np.concatenate([s1, [-1], s2, [-2], s3]).astype(np.int64)
        groups = np.concatenate([
            np.full(len(s1) + 1, GROUP_1), np.full(len(s2) + 1, GROUP_2), np.full(len(s3), GROUP_3),
        ]).astype(np.int64)
        return idx, groups

    def layout_columns(self):
        """Layout positions of the T tokens (query slots skipped)."""
        n1 = int(np.sum(self.token_region == S1))
        n2 = int(np.sum(self.token_region == S2))
        t = len(self.tokens)
        cols = np.arange(t)
        cols[n1:] += 1
        cols[n1 + n2:] += 1
        return cols


def prepare(sample: OverlapSample, encoder, use_gt_targets=True) -> Prepared:
    feats, centered = encoder_inputs(sample.positions, sample.colors)
    sp = np.asarray(sample.superpoint, dtype=np.int64)
    n_sp = int(sp.max()) + 1
    sp_region = np.full(n_sp, -1, dtype=np.int64)
    sp_region[sp] = sample.region
    # stable sort by region; background superpoints never become tokens
    order = np.argsort(sp_region, kind="stable")
    tokens = order[np.isin(sp_region[order], (S1, S2, S3))]
    token_region = sp_region[tokens]
    targets = None
    if use_gt_targets and sample.gt_label is not None:
        counts = np.bincount(sp, minlength=n_sp).astype(np.float64)
        fa = np.bincount(sp, weights=(sample.gt_label == LABEL_A), minlength=n_sp) / counts
        fb = np.bincount(sp, weights=(sample.gt_label == LABEL_B), minlength=n_sp) / counts
        targets = np.stack([fa[tokens], fb[tokens]]).astype(np.float32)
    s3_tokens = tokens[token_region == S3]
    col_of = np.full(n_sp, -1, dtype=np.int64)
    col_of[s3_tokens] = np.arange(len(s3_tokens))
    s3_pts = sample.region == S3
    return Prepared(
        feats=feats.astype(np.float32), enc_index=encoder.prepare(centered), superpoint=sp,
        n_superpoints=n_sp, tokens=tokens, token_region=token_region,
        categories=np.array(sample.categories, dtype=np.int64), targets=targets,
        s3_point_token=col_of[sp[s3_pts]],
        gt_s3=None if sample.gt_label is None else sample.gt_label[s3_pts],
    )


@dataclass
class Batch:
    feats: torch.Tensor
    enc_index: dict
    superpoint: torch.Tensor
    n_superpoints: int
    token_index: torch.Tensor   # (B, L)
    groups: torch.Tensor        # (B, L)
    region: torch.Tensor        # (B, L): S1/S2/S3 per token, -1 at queries and padding
    token_mask: torch.Tensor    # (B, L)
    targets: torch.Tensor | None
    categories: torch.Tensor    # (B, 2)
    columns: list               # per sample: layout positions of its tokens


def collate(items, dtype=None) -> Batch:
    dtype = dtype or torch.get_default_dtype()
    feats = torch.as_tensor(np.concatenate([p.feats for p in items]), dtype=dtype)
    enc = {}
    for name in items[0].enc_index:
        ids, n = collate_indices([p.enc_index[name] for p in items])
        enc[name] = (torch.as_tensor(ids), n)
    sp, n_sp = collate_indices([Index(p.superpoint, p.n_superpoints) for p in items])
    layouts = [p.layout() for p in items]
    L = max(len(l[0]) for l in layouts)
    B = len(items)
    tok = np.full((B, L), -3, dtype=np.int64)
    groups = np.full((B, L), GROUP_PAD, dtype=np.int64)
    region = np.full((B, L), -1, dtype=np.int64)
    targets = np.zeros((B, 2, L), dtype=np.float64) if all(p.targets is not None for p in items) else None
    columns = []
    base = 0
    for b, (p, (idx, g)) in enumerate(zip(items, layouts)):
        shifted = idx.copy()
        shifted[idx >= 0] += base
        base += p.n_superpoints
        tok[b, :len(idx)] = shifted
        groups[b, :len(g)] = g
        cols = p.layout_columns()
        columns.append(cols)
        region[b, cols] = p.token_region
        if targets is not None:
            targets[b][:, cols] = p.targets
    return Batch(
        feats=feats, enc_index=enc, superpoint=torch.as_tensor(sp), n_superpoints=n_sp,
        token_index=torch.as_tensor(tok), groups=torch.as_tensor(groups), region=torch.as_tensor(region),
        token_mask=torch.as_tensor(region >= 0),
        targets=None if targets is None else torch.as_tensor(targets, dtype=dtype),
        categories=torch.as_tensor(np.stack([p.categories for p in items])), columns=columns,
    )


@torch.no_grad()
def predict_logits(model: Labeler, prepared, batch_size=32):
    """Per sample: (2, |S3 tokens|) mask logits as float64 numpy arrays."""
    was = model.training
    model.eval()
    out = []
    for i in range(0, len(prepared), batch_size):
        chunk = prepared[i:i + batch_size]
        batch = collate(chunk)
        logits, _, _ = model(batch)
        for b, p in enumerate(chunk):
            cols = batch.columns[b][p.token_region == S3]
            out.append(logits[b][:, cols].double().numpy())
    model.train(was)
    return out


def point_labels(prepared: Prepared, s3_logits):
    """Broadcast superpoint decisions to the S3 points of the sample."""
    return resolve_labels(s3_logits)[prepared.s3_point_token]
