"""Topology-aware skeleton encoder (graph relative positional encoding)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ShapeMismatch
from .nn_core import (
    FeedForward,
    LayerNorm,
    Linear,
    ModelConfig,
    biased_attention,
    embedding_lookup,
    sinusoidal_features,
)
from .skeleton import N_RELATIONS, Skeleton, TopologyMatrices

CODEBOOK_STD = 0.02


@dataclass
class SkeletonBatch:
    """Padded batch of skeletons; ``mask[b, j]`` is True for real joints."""

    joints: Tensor  # (B, N, 3)
    D: Tensor  # (B, N, N) long
    R: Tensor  # (B, N, N) long
    mask: Tensor  # (B, N) bool

    @property
    def batch_size(self) -> int:
        return self.joints.shape[0]

    def to(self, dtype: torch.dtype) -> "SkeletonBatch":
        return SkeletonBatch(self.joints.to(dtype), self.D, self.R, self.mask)

    def index(self, idx) -> "SkeletonBatch":
        return SkeletonBatch(self.joints[idx], self.D[idx], self.R[idx], self.mask[idx])


def collate_skeletons(
    skeletons: Sequence[Skeleton], d_max: int = 5, dtype: torch.dtype = torch.float32, pad_to: int | None = None
) -> SkeletonBatch:
    n = max(s.n_joints for s in skeletons)
    if pad_to is not None:
        n = max(n, pad_to)
    b = len(skeletons)
    joints = np.zeros((b, n, 3))
    D = np.zeros((b, n, n), dtype=np.int64)
    R = np.zeros((b, n, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, s in enumerate(skeletons):
        k = s.n_joints
        topo = TopologyMatrices.of(s, d_max)
        joints[i, :k] = s.joints
        D[i, :k, :k] = topo.D
        R[i, :k, :k] = topo.R
        mask[i, :k] = True
    return SkeletonBatch(
        torch.from_numpy(joints).to(dtype), torch.from_numpy(D), torch.from_numpy(R), torch.from_numpy(mask)
    )


def grpe_score_terms(q: Tensor, k: Tensor, dist_q: Tensor, dist_k: Tensor, rel_q: Tensor, rel_k: Tensor,
                     D: Tensor, R: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Unscaled score pieces: ``q_i . k_j``, the distance bias and the relation bias."""
    dot = q @ k.transpose(-1, -2)
    qi = q.unsqueeze(-2)
    kj = k.unsqueeze(-3)
    a_dist = (qi * embedding_lookup(dist_q, D)).sum(-1) + (kj * embedding_lookup(dist_k, D)).sum(-1)
    a_rel = (qi * embedding_lookup(rel_q, R)).sum(-1) + (kj * embedding_lookup(rel_k, R)).sum(-1)
    return dot, a_dist, a_rel


class GRPEAttention(nn.Module):
    """Single-head attention whose scores and values carry topology codebooks."""

    def __init__(self, dim: int, d_max: int = 5):
        super().__init__()
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)
        self.dist_q = nn.Parameter(torch.randn(d_max + 1, dim) * CODEBOOK_STD)
        self.dist_k = nn.Parameter(torch.randn(d_max + 1, dim) * CODEBOOK_STD)
        self.dist_v = nn.Parameter(torch.randn(d_max + 1, dim) * CODEBOOK_STD)
        self.rel_q = nn.Parameter(torch.randn(N_RELATIONS, dim) * CODEBOOK_STD)
        self.rel_k = nn.Parameter(torch.randn(N_RELATIONS, dim) * CODEBOOK_STD)
        self.rel_v = nn.Parameter(torch.randn(N_RELATIONS, dim) * CODEBOOK_STD)

    def codebooks(self) -> list[nn.Parameter]:
        return [self.dist_q, self.dist_k, self.dist_v, self.rel_q, self.rel_k, self.rel_v]

    def attend(self, x: Tensor, D: Tensor, R: Tensor, mask: Tensor | None = None) -> Tensor:
        """Attention output before the output projection."""
        if D.shape[-1] != x.shape[-2] or R.shape != D.shape:
            raise ShapeMismatch(f"topology {tuple(D.shape)} does not match {x.shape[-2]} joints")
        q, k, v = self.q(x), self.k(x), self.v(x)
        _, a_dist, a_rel = grpe_score_terms(q, k, self.dist_q, self.dist_k, self.rel_q, self.rel_k, D, R)
        value_bias = embedding_lookup(self.dist_v, D) + embedding_lookup(self.rel_v, R)
        return biased_attention(q, k, v, a_dist + a_rel, value_bias, key_mask=mask)

    def forward(self, x: Tensor, D: Tensor, R: Tensor, mask: Tensor | None = None) -> Tensor:
        return self.o(self.attend(x, D, R, mask))


class EncoderUnit(nn.Module):
    def __init__(self, dim: int, d_max: int, ffn_multiplier: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = GRPEAttention(dim, d_max)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_multiplier)

    def forward(self, x, D, R, mask=None):
        x = x + self.attn(self.norm1(x), D, R, mask)
        return x + self.ffn(self.norm2(x))


class SkeletonEncoder(nn.Module):
    """Joint coordinates + topology -> one F-dimensional token per joint."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        f = config.feature_dim
        self.freq_bands = config.freq_bands
        self.d_max = config.d_max
        self.embed = Linear(3 * 2 * config.freq_bands, f)
        self.units = nn.ModuleList(
            EncoderUnit(f, config.d_max, config.ffn_multiplier) for _ in range(config.n_encoder_units)
        )

    def embed_joints(self, joints: Tensor) -> Tensor:
        return self.embed(sinusoidal_features(joints, self.freq_bands))

    def forward(self, batch: SkeletonBatch) -> Tensor:
        x = self.embed_joints(batch.joints)
        for unit in self.units:
            x = unit(x, batch.D, batch.R, batch.mask)
        return x


def encode_skeleton(encoder: SkeletonEncoder, skel: Skeleton) -> Tensor:
    """Encode one skeleton; returns an (N, F) token matrix."""
    dtype = next(encoder.parameters()).dtype
    return encoder(collate_skeletons([skel], encoder.d_max, dtype))[0]
