"""Backbone pretraining and adapter training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor

from .adapter import SKAdapterModel
from .backbone import Backbone, encode_occupancy
from .data import DatasetSample
from .encoder import SkeletonBatch, collate_skeletons
from .errors import FrozenViolation
from .flow import DropoutStats, TrainConfig, fm_loss
from .nn_core import ParamStore, TRAIN_DTYPE, make_optimizer

log = logging.getLogger(__name__)


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    steps: int = 0
    dropout: DropoutStats = field(default_factory=DropoutStats)


def stack_latents(samples: Sequence[DatasetSample], channels: int, dtype=TRAIN_DTYPE) -> Tensor:
    return torch.stack([encode_occupancy(s.occupancy, channels, dtype) for s in samples])


def stack_labels(samples: Sequence[DatasetSample]) -> Tensor:
    return torch.tensor([s.label for s in samples], dtype=torch.long)


def batch_skeletons(samples: Sequence[DatasetSample], d_max: int, dtype=TRAIN_DTYPE,
                    pad_to: int | None = None) -> SkeletonBatch:
    return collate_skeletons([s.skeleton for s in samples], d_max, dtype, pad_to)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


@torch.no_grad()
def validation_loss(model, z0: Tensor, labels: Tensor, skel: SkeletonBatch | None, null_label: int,
                    seed: int = 1234, batch_size: int = 32) -> float:
    """Fixed-noise flow-matching loss (no label dropout) for progress tracking."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for i in range(0, z0.shape[0], batch_size):
        sl = slice(i, i + batch_size)
        sk = skel.index(sl) if skel is not None else None
        loss = fm_loss(model, z0[sl], labels[sl], sk, gen, null_label, text_dropout_p=0.0)
        total += loss.item() * z0[sl].shape[0]
        count += z0[sl].shape[0]
    return total / count


def pretrain_backbone(
    backbone: Backbone,
    samples: Sequence[DatasetSample],
    cfg: TrainConfig,
    seed: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainHistory:
    """Skeleton-free flow matching on the dataset, then freeze every parameter."""
    backbone.requires_grad_(True)
    backbone.train()
    dtype = next(backbone.parameters()).dtype
    z0 = stack_latents(samples, backbone.config.latent_channels, dtype)
    labels = stack_labels(samples)
    opt = make_optimizer(backbone.parameters(), cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        running, seen = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, gen):
            loss = fm_loss(backbone, z0[idx], labels[idx], None, gen, backbone.null_label,
                           cfg.text_dropout_p, hist.dropout)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            hist.steps += 1
            running += loss.item() * len(idx)
            seen += len(idx)
        hist.epoch_loss.append(running / seen)
        log.info("stage=pretrain epoch=%d loss=%.6f", epoch, hist.epoch_loss[-1])
        if on_epoch:
            on_epoch(epoch, hist.epoch_loss[-1])
    backbone.requires_grad_(False)
    backbone.eval()
    return hist


def train_adapter(
    model: SKAdapterModel,
    samples: Sequence[DatasetSample],
    cfg: TrainConfig,
    seed: int = 0,
    val_samples: Sequence[DatasetSample] | None = None,
    max_steps: int | None = None,
    on_epoch: Callable[[int, float, float | None], None] | None = None,
) -> TrainHistory:
    """Optimize only ``encoder.*`` and ``adapter.*``; the backbone hash must not move."""
    store = ParamStore.from_module(model)
    frozen_before = store.hashes("backbone.")
    if set(store.trainable_names()) != {n for n in store.names() if n.startswith(("encoder.", "adapter."))}:
        raise FrozenViolation("trainable set must be exactly encoder.* and adapter.*")

    cfg_model = model.config
    dtype = next(model.parameters()).dtype
    z0 = stack_latents(samples, cfg_model.latent_channels, dtype)
    labels = stack_labels(samples)
    skel = batch_skeletons(samples, cfg_model.d_max, dtype)
    if val_samples:
        vz = stack_latents(val_samples, cfg_model.latent_channels, dtype)
        vl = stack_labels(val_samples)
        vs = batch_skeletons(val_samples, cfg_model.d_max, dtype)

    opt = make_optimizer(model.parameters(), cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    hist = TrainHistory()
    null = model.backbone.null_label
    model.train()
    for epoch in range(cfg.epochs):
        running, seen = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, gen):
            if max_steps is not None and hist.steps >= max_steps:
                break
            loss = fm_loss(model, z0[idx], labels[idx], skel.index(idx), gen, null, cfg.text_dropout_p,
                           hist.dropout)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            hist.steps += 1
            running += loss.item() * len(idx)
            seen += len(idx)
        if seen:
            hist.epoch_loss.append(running / seen)
        val = None
        if val_samples:
            model.eval()
            val = validation_loss(model, vz, vl, vs, null)
            model.train()
            hist.val_loss.append(val)
        log.info("stage=train-adapter epoch=%d loss=%.6f val=%s", epoch, hist.epoch_loss[-1] if seen else float("nan"),
                 "na" if val is None else f"{val:.6f}")
        if on_epoch:
            on_epoch(epoch, hist.epoch_loss[-1] if seen else float("nan"), val)
        if max_steps is not None and hist.steps >= max_steps:
            break
    model.eval()
    assert hist.dropout.skeleton_dropped == 0
    if ParamStore.from_module(model).hashes("backbone.") != frozen_before:
        raise FrozenViolation("backbone parameters changed during adapter training")
    return hist
