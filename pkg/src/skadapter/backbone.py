"""Frozen voxel-latent flow transformer and its analytic occupancy encoder/decoder.

The latent grid of an occupancy grid of resolution V has resolution V/2.
Tokens are flattened in C order over (x, y, z) cells, giving tensors of
shape (B, (V/2)^3, C).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .errors import OutOfRange, ShapeMismatch
from .nn_core import (
    FeedForward,
    LayerNorm,
    Linear,
    ModelConfig,
    multihead_attention,
    sinusoidal_features,
)

# Fixed normalization of the pooled occupancy channel: pooled fractions of the
# synthetic capsule data have mean ~0.038 and std ~0.152 (measured once at V=16).
OCC_SHIFT = 0.0375
OCC_SCALE = 0.15
DECODE_THRESHOLD = 0.5

Hook = Callable[[int, Tensor], Tensor]


def check_occupancy(occ: np.ndarray) -> np.ndarray:
    occ = np.asarray(occ)
    if occ.ndim != 3 or len(set(occ.shape)) != 1:
        raise ShapeMismatch(f"occupancy must be V x V x V, got {occ.shape}")
    v = occ.shape[0]
    if v < 2 or v & (v - 1):
        raise ShapeMismatch(f"occupancy resolution must be a power of two, got {v}")
    return occ.astype(bool, copy=False)


def latent_positions(res: int) -> np.ndarray:
    """Integer (x, y, z) cell index for each latent token, in token order."""
    idx = np.indices((res, res, res)).reshape(3, -1).T
    return idx.astype(np.int64)


def encode_occupancy(occ: np.ndarray, channels: int = 4, dtype: torch.dtype = torch.float32) -> Tensor:
    """2x2x2 average pool into channel 0, remaining channels zero, fixed affine.

    Returns a ((V/2)^3, channels) tensor.
    """
    occ = check_occupancy(occ)
    v = occ.shape[0]
    d = v // 2
    pooled = occ.astype(np.float64).reshape(d, 2, d, 2, d, 2).mean(axis=(1, 3, 5))
    z = np.zeros((d * d * d, channels))
    z[:, 0] = (pooled.reshape(-1) - OCC_SHIFT) / OCC_SCALE
    return torch.from_numpy(z).to(dtype)


def decode_latent(z: Tensor, threshold: float = DECODE_THRESHOLD) -> np.ndarray:
    """Inverse affine on channel 0, nearest-neighbour upsample x2, binarize."""
    z = z.detach()
    if not torch.isfinite(z).all():
        raise ValueError("latent contains non-finite values")
    n_tokens = z.shape[-2]
    d = round(n_tokens ** (1 / 3))
    if d**3 != n_tokens:
        raise ShapeMismatch(f"{n_tokens} tokens is not a cube")
    pooled = (z[..., 0].double().cpu().numpy() * OCC_SCALE + OCC_SHIFT).reshape(*z.shape[:-2], d, d, d)
    occ = pooled >= threshold
    for axis in (-3, -2, -1):
        occ = np.repeat(occ, 2, axis=axis)
    return occ


def latent_mask_from_voxel_box(box, voxel_res: int) -> np.ndarray:
    """Latent-cell mask for a voxel-space box ``(x0, y0, z0, x1, y1, z1)``, half-open.

    Lower corners are floored and upper corners ceiled onto the 2x coarser latent grid.
    """
    from .errors import MaskOutOfBounds

    lo = np.asarray(box[:3], dtype=np.float64)
    hi = np.asarray(box[3:], dtype=np.float64)
    if np.any(lo < 0) or np.any(hi > voxel_res) or np.any(lo > hi):
        raise MaskOutOfBounds(f"box {list(box)} outside [0, {voxel_res}]^3")
    d = voxel_res // 2
    lo_c = np.floor(lo / 2).astype(int)
    hi_c = np.ceil(hi / 2).astype(int)
    mask = np.zeros((d, d, d), dtype=bool)
    mask[lo_c[0]:hi_c[0], lo_c[1]:hi_c[1], lo_c[2]:hi_c[2]] = True
    return mask


def timestep_features(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = 1000.0 * t.unsqueeze(-1) * freqs
    feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        feats = torch.cat([feats, torch.zeros_like(feats[..., :1])], dim=-1)
    return feats


class TimestepEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = Linear(dim, dim)
        self.fc2 = Linear(dim, dim)

    def forward(self, t: Tensor) -> Tensor:
        if torch.any((t < 0) | (t > 1)):
            raise OutOfRange("timestep must lie in [0, 1]")
        return self.fc2(torch.nn.functional.silu(self.fc1(timestep_features(t, self.dim))))


class BackboneBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, ffn_multiplier: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = LayerNorm(dim)
        self.attn_q = Linear(dim, dim)
        self.attn_k = Linear(dim, dim)
        self.attn_v = Linear(dim, dim)
        self.attn_o = Linear(dim, dim)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_multiplier)

    def forward(self, h: Tensor, hook: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        x = self.norm1(h)
        h = h + self.attn_o(multihead_attention(self.attn_q(x), self.attn_k(x), self.attn_v(x), self.n_heads))
        if hook is not None:
            h = hook(h)
        return h + self.ffn(self.norm2(h))


def _init_positional(res: int, dim: int, bands: int = 4) -> Tensor:
    centers = (latent_positions(res) + 0.5) / res - 0.5
    feats = sinusoidal_features(torch.from_numpy(centers), min(bands, dim // 6)).float()
    pos = torch.zeros(res**3, dim)
    pos[:, : feats.shape[1]] = feats
    return pos + 0.02 * torch.randn(res**3, dim)


class Backbone(nn.Module):
    """Label- and timestep-conditioned transformer predicting latent velocity."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        f = config.feature_dim
        self.config = config
        self.n_tokens = config.latent_res**3
        self.null_label = config.n_labels
        self.in_proj = Linear(config.latent_channels, f)
        self.pos_embed = nn.Parameter(_init_positional(config.latent_res, f))
        self.time_embed = TimestepEmbed(f)
        self.label_embed = nn.Parameter(0.02 * torch.randn(config.n_labels + 1, f))
        self.blocks = nn.ModuleList(
            BackboneBlock(f, config.n_heads, config.ffn_multiplier) for _ in range(config.n_backbone_blocks)
        )
        self.out_norm = LayerNorm(f)
        self.out_proj = Linear(f, config.latent_channels)

    def forward(self, z: Tensor, t: Tensor, label: Tensor, hook: Hook | None = None) -> Tensor:
        if z.shape[-2:] != (self.n_tokens, self.config.latent_channels):
            raise ShapeMismatch(f"latent {tuple(z.shape)} vs ({self.n_tokens}, {self.config.latent_channels})")
        t = torch.as_tensor(t, dtype=z.dtype).expand(z.shape[0])
        label = torch.as_tensor(label, dtype=torch.long).expand(z.shape[0])
        cond = self.time_embed(t) + self.label_embed[label]
        h = self.in_proj(z) + self.pos_embed + cond.unsqueeze(1)
        for i, block in enumerate(self.blocks):
            block_hook = None if hook is None else (lambda x, i=i: hook(i, x))
            h = block(h, block_hook)
        return self.out_proj(self.out_norm(h))
