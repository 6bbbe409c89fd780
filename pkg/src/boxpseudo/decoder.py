"""Local-global aware attention decoder with two region-bound queries.

Token layout per sample: ``[S1 superpoints, Q1, S2 superpoints, Q2, S3 superpoints]``.
The local stage runs self-attention separately inside ``S1 + Q1`` and
``S2 + Q2``; the global stage attends over every token. Mask logits are dot
products between the updated queries and the final superpoint features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .overlap import LABEL_A, LABEL_B, LABEL_BG

GROUP_PAD, GROUP_1, GROUP_2, GROUP_3 = 0, 1, 2, 3


def attention_bias(allowed, dtype=None):
    """0 where attention is allowed, -inf elsewhere."""
    dtype = dtype or torch.get_default_dtype()
    zero = torch.zeros((), dtype=dtype)
    return torch.where(allowed, zero, torch.full((), float("-inf"), dtype=dtype))


class SelfAttention(nn.Module):
    """softmax(Q K^T / sqrt(d)) V with Q, K, V = X W_q, X W_k, X W_v."""

    def __init__(self, channels, heads=1):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(channels, channels, bias=False)
        self.w_v = nn.Linear(channels, channels, bias=False)

    def forward(self, x, allowed=None):
        """``allowed`` is a boolean (..., L, L) mask or an additive float bias."""
        *lead, L, C = x.shape
        h, d = self.heads, C // self.heads

        def split(t):
            return t.reshape(*lead, L, h, d).transpose(-3, -2)

        q, k, v = split(self.w_q(x)), split(self.w_k(x)), split(self.w_v(x))
        bias = None
        if allowed is not None:
            bias = attention_bias(allowed, x.dtype) if allowed.dtype == torch.bool else allowed
            bias = bias.unsqueeze(-3)
        # fused kernel; same softmax(q k^T / sqrt(d)) v as the explicit form
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias, scale=1.0 / math.sqrt(d))
        return out.transpose(-3, -2).reshape(*lead, L, C)


class AttentionBlock(nn.Module):
    """Self-attention then feed-forward, each with a residual and LayerNorm."""

    def __init__(self, channels, heads=1, hidden=2):
        super().__init__()
        self.attn = SelfAttention(channels, heads)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, hidden * channels), nn.ReLU(), nn.Linear(hidden * channels, channels),
        )
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, x, allowed=None):
        x = self.norm1(x + self.attn(x, allowed))
        return self.norm2(x + self.ffn(x))


@dataclass
class DecoderOutput:
    mask_logits: torch.Tensor     # (2, |S3|)
    class_logits: torch.Tensor    # (2, num_categories + 1)
    queries: torch.Tensor         # (2, C)
    token_logits: torch.Tensor | None = None  # (2, |S1| + |S2| + |S3|), same order as tokens

    @property
    def probs(self):
        return torch.sigmoid(self.mask_logits)

    @property
    def m1(self):
        return self.probs[0] > 0.5

    @property
    def m2(self):
        return self.probs[1] > 0.5

    @property
    def background(self):
        return ~self.m1 & ~self.m2

    def labels(self):
        return resolve_labels(self.mask_logits)


def resolve_labels(logits):
    """A / B / BG per column of a (2, n) logit array.

    Thresholds sigmoid at 0.5 (strict); columns where both fire go to the
    larger probability, ties to A.
    """
    p = torch.sigmoid(torch.as_tensor(logits, dtype=torch.float64)).numpy()
    m1, m2 = p[0] > 0.5, p[1] > 0.5
    out = np.full(p.shape[1], LABEL_BG, dtype=np.int8)
    out[m1 & ~m2] = LABEL_A
    out[m2 & ~m1] = LABEL_B
    both = m1 & m2
    out[both & (p[0] >= p[1])] = LABEL_A
    out[both & (p[0] < p[1])] = LABEL_B
    return out


class LGADecoder(nn.Module):
    def __init__(self, channels=32, num_categories=5, heads=1, local_layers=1, global_layers=1,
                 rounds=1, query_std=0.02):
        super().__init__()
        self.channels = channels
        self.num_categories = num_categories
        self.q1 = nn.Parameter(torch.randn(channels) * query_std)
        self.q2 = nn.Parameter(torch.randn(channels) * query_std)
        self.local_blocks = nn.ModuleList(
            [nn.ModuleList([AttentionBlock(channels, heads) for _ in range(local_layers)]) for _ in range(rounds)])
        self.global_blocks = nn.ModuleList(
            [nn.ModuleList([AttentionBlock(channels, heads) for _ in range(global_layers)]) for _ in range(rounds)])
        self.class_head = nn.Linear(channels, num_categories + 1)

    # -- single-sample stages ------------------------------------------------

    def local_structure_attention(self, f1, f2, q1=None, q2=None, round_index=0):
        """Self-attention within ``S1 + Q1`` and within ``S2 + Q2`` separately."""
        q1 = self.q1 if q1 is None else q1
        q2 = self.q2 if q2 is None else q2
        v1 = torch.cat([f1, q1[None]])
        v2 = torch.cat([f2, q2[None]])
        for block in self.local_blocks[round_index]:
            v1, v2 = block(v1), block(v2)
        return v1, v2

    def global_context_attention(self, v1, v2, f3, round_index=0):
        """Joint self-attention over the local outputs and S3 features.

        Returns (queries (2, C), all token features in layout order).
        """
        x = torch.cat([v1, v2, f3])
        for block in self.global_blocks[round_index]:
            x = block(x)
        n1, n2 = len(v1), len(v2)
        return torch.stack([x[n1 - 1], x[n1 + n2 - 1]]), x

    def predict_masks(self, queries, f3):
        return DecoderOutput(queries @ f3.T, self.class_head(queries), queries)

    def decode(self, f1, f2, f3):
        q1, q2 = self.q1, self.q2
        for r in range(len(self.local_blocks)):
            v1, v2 = self.local_structure_attention(f1, f2, q1, q2, r)
            queries, x = self.global_context_attention(v1, v2, f3, r)
            n1, n2 = len(f1), len(f2)
            f1, q1 = x[:n1], x[n1]
            f2, q2 = x[n1 + 1:n1 + 1 + n2], x[n1 + 1 + n2]
            f3 = x[n1 + n2 + 2:]
        out = self.predict_masks(queries, f3)
        out.token_logits = queries @ torch.cat([f1, f2, f3]).T
        return out

    def decode_features(self, features):
        s1, s2, s3 = (torch.as_tensor(r, dtype=torch.long) for r in features.region_split)
        f = features.superpoint_features
        return self.decode(f[s1], f[s2], f[s3])

    # -- batched path --------------------------------------------------------

    def forward(self, table, token_index, groups):
        """Batched decode.

        ``table`` holds superpoint features for the whole batch; ``token_index``
        (B, L) indexes it, with -1 for Q1, -2 for Q2 and -3 for padding;
        ``groups`` (B, L) tags tokens with GROUP_* codes. Returns
        (token logits (B, 2, L), class logits (B, 2, K+1), queries (B, 2, C)).
        """
        n = len(table)
        full = torch.cat([table, table.new_zeros((3, self.channels))])
        idx = token_index.clone()
        idx[token_index == -3] = n + 2
        is_q1, is_q2 = token_index == -1, token_index == -2
        idx[is_q1] = n
        idx[is_q2] = n + 1
        x = full[idx]
        # tokens attend where their codes match; unique negative codes leave
        # padding (and S3 in the local stage) attending only to themselves
        own = -1 - torch.arange(groups.shape[1]).expand_as(groups)
        in_local = (groups == GROUP_1) | (groups == GROUP_2)
        local_code = torch.where(in_local, groups, own)
        glob_code = torch.where(groups != GROUP_PAD, torch.zeros_like(groups), own)
        local = attention_bias(local_code[:, :, None] == local_code[:, None, :], x.dtype)
        glob = attention_bias(glob_code[:, :, None] == glob_code[:, None, :], x.dtype)
        q1, q2 = self.q1, self.q2
        for r in range(len(self.local_blocks)):
            x = torch.where(is_q1[..., None], q1, x)
            x = torch.where(is_q2[..., None], q2, x)
            y = x
            for block in self.local_blocks[r]:
                y = block(y, local)
            x = torch.where(in_local[..., None], y, x)
            for block in self.global_blocks[r]:
                x = block(x, glob)
            q1 = x[is_q1][:, None, :]
            q2 = x[is_q2][:, None, :]
        queries = torch.cat([q1, q2], dim=1)
        logits = queries @ x.transpose(1, 2)
        return logits, self.class_head(queries), queries
