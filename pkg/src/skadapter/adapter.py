"""Skeletal cross-attention adapter with zero-initialized residual injection."""

from __future__ import annotations

import re

import torch
from torch import Tensor, nn

from .backbone import Backbone
from .encoder import SkeletonBatch, SkeletonEncoder
from .errors import ConfigMismatch, ShapeMismatch
from .nn_core import (
    ROW_ADAPTER_LN,
    ROW_CROSS,
    ROW_ENC_LN,
    ROW_FFN,
    ROW_JOINT_EMBED,
    ROW_TOPO_ATTN,
    ROW_ZERO,
    LayerNorm,
    Linear,
    ModelConfig,
    ParamStore,
    multihead_attention,
)


def inject(h: Tensor, f_attn: Tensor, proj: Linear) -> Tensor:
    """Residual update ``h + W_o f_attn``."""
    if h.shape != f_attn.shape:
        raise ShapeMismatch(f"inject: h {tuple(h.shape)} vs f_attn {tuple(f_attn.shape)}")
    return h + proj(f_attn)


class AdapterBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm_h = LayerNorm(dim)
        self.norm_s = LayerNorm(dim)  # shared by K and V
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)
        self.zero = Linear(dim, dim, zero_init=True)

    def cross_attention(self, h: Tensor, f_skel: Tensor, mask: Tensor | None = None) -> Tensor:
        if h.shape[-1] != f_skel.shape[-1]:
            raise ShapeMismatch(f"voxel features {tuple(h.shape)} vs skeleton tokens {tuple(f_skel.shape)}")
        s = self.norm_s(f_skel)
        out = multihead_attention(self.q(self.norm_h(h)), self.k(s), self.v(s), self.n_heads, key_mask=mask)
        return self.o(out)

    def forward(self, h: Tensor, f_skel: Tensor, mask: Tensor | None = None) -> Tensor:
        return inject(h, self.cross_attention(h, f_skel, mask), self.zero)


class SKAdapterModel(nn.Module):
    """Frozen backbone + trainable skeleton encoder and per-block adapters."""

    def __init__(self, backbone: Backbone, encoder: SkeletonEncoder, adapter: nn.ModuleDict):
        super().__init__()
        self.backbone = backbone
        self.encoder = encoder
        self.adapter = adapter
        self.hooked = sorted(int(k.removeprefix("block")) for k in adapter.keys())

    @property
    def config(self) -> ModelConfig:
        return self.backbone.config

    def encode(self, skel: SkeletonBatch) -> Tensor:
        return self.encoder(skel)

    def forward(
        self,
        z: Tensor,
        t: Tensor,
        label: Tensor,
        skel: SkeletonBatch | None = None,
        f_skel: Tensor | None = None,
    ) -> Tensor:
        """Predict velocity. Without a skeleton this is exactly the bare backbone."""
        if skel is None:
            return self.backbone(z, t, label)
        if f_skel is None:
            f_skel = self.encoder(skel)
        mask = skel.mask

        def hook(i: int, h: Tensor) -> Tensor:
            key = f"block{i}"
            if key not in self.adapter:
                return h
            return self.adapter[key](h, f_skel, mask)

        return self.backbone(z, t, label, hook)


def make_adapter(config: ModelConfig) -> nn.ModuleDict:
    return nn.ModuleDict({f"block{i}": AdapterBlock(config.feature_dim, config.n_heads) for i in config.hooks})


def attach_adapter(backbone: Backbone, adapter: nn.ModuleDict, encoder: SkeletonEncoder) -> SKAdapterModel:
    """Freeze the backbone and wire one adapter block into each hooked block."""
    hooks = backbone.config.hooks
    keys = sorted(adapter.keys())
    if len(keys) != len(hooks) or set(keys) != {f"block{i}" for i in hooks}:
        raise ConfigMismatch(f"{len(keys)} adapter blocks for hooked backbone blocks {list(hooks)}")
    backbone.requires_grad_(False)
    encoder.requires_grad_(True)
    adapter.requires_grad_(True)
    return SKAdapterModel(backbone, encoder, adapter)


def build_model(config: ModelConfig, seed: int = 0, backbone: Backbone | None = None,
                dtype: torch.dtype = torch.float32) -> SKAdapterModel:
    """Construct a composite; a fresh backbone is created when none is given."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        if backbone is None:
            backbone = Backbone(config)
        encoder = SkeletonEncoder(config)
        adapter = make_adapter(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return attach_adapter(backbone, adapter, encoder).to(dtype)


_INVENTORY_PATTERNS = [
    (re.compile(r"^encoder\.units\.\d+\.attn\."), ROW_TOPO_ATTN),
    (re.compile(r"^encoder\.units\.\d+\.ffn\."), ROW_FFN),
    (re.compile(r"^encoder\.units\.\d+\.norm\d\."), ROW_ENC_LN),
    (re.compile(r"^encoder\.embed\."), ROW_JOINT_EMBED),
    (re.compile(r"^adapter\.block\d+\.[qkvo]\."), ROW_CROSS),
    (re.compile(r"^adapter\.block\d+\.zero\."), ROW_ZERO),
    (re.compile(r"^adapter\.block\d+\.norm_[hs]\."), ROW_ADAPTER_LN),
]


def trainable_inventory(store: ParamStore) -> dict[str, int]:
    """Group the trainable tensors of a composite into accounting rows."""
    totals: dict[str, int] = {}
    for name, entry in store.items():
        if entry.frozen:
            continue
        for pattern, row in _INVENTORY_PATTERNS:
            if pattern.match(name):
                totals[row] = totals.get(row, 0) + entry.tensor.numel()
                break
        else:
            raise KeyError(f"trainable tensor {name!r} fits no accounting row")
    return totals
