"""Rectified flow: interpolation, loss, guidance, Euler sampling and masked editing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from torch import Tensor

from .backbone import decode_latent
from .encoder import SkeletonBatch
from .errors import MaskOutOfBounds, OutOfRange


class VelocityModel(Protocol):
    def __call__(self, z: Tensor, t: Tensor, label: Tensor, skel: SkeletonBatch | None = None,
                 f_skel: Tensor | None = None) -> Tensor: ...


@dataclass(frozen=True)
class FlowSampleConfig:
    steps: int = 50
    cfg_weight: float = 3.0
    seed: int = 0
    # boolean latent-grid mask (D, D, D), True = regenerate
    mask: np.ndarray | None = field(default=None, compare=False)
    resample_u: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.resample_u < 1:
            raise ValueError("resample_u must be >= 1")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-4
    text_dropout_p: float = 0.10
    skeleton_dropout_p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.text_dropout_p <= 1.0:
            raise ValueError("text_dropout_p must lie in [0, 1]")
        if self.skeleton_dropout_p != 0.0:
            raise ValueError("skeleton conditioning is never dropped (skeleton_dropout_p must be 0)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")


@dataclass
class DropoutStats:
    items: int = 0
    cond_dropped: int = 0
    skeleton_dropped: int = 0

    @property
    def cond_fraction(self) -> float:
        return self.cond_dropped / self.items if self.items else 0.0


def interpolate(z0: Tensor, eps: Tensor, t) -> Tensor:
    """``z_t = (1 - t) z0 + t eps``; ``t`` is a scalar or one value per batch item."""
    t = torch.as_tensor(t, dtype=z0.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise OutOfRange("t must lie in [0, 1]")
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if t.dim() == 1:
        t = t.reshape(-1, *([1] * (z0.dim() - 1)))
    return (1 - t) * z0 + t * eps


def target_velocity(z0: Tensor, eps: Tensor) -> Tensor:
    return eps - z0


def drop_labels(labels: Tensor, null_label: int, p: float, gen: torch.Generator) -> tuple[Tensor, Tensor]:
    """Replace each label by ``null_label`` with probability ``p``."""
    dropped = torch.rand(labels.shape, generator=gen) < p
    return torch.where(dropped, torch.full_like(labels, null_label), labels), dropped


def fm_loss(
    model: VelocityModel,
    z0: Tensor,
    labels: Tensor,
    skel: SkeletonBatch | None,
    gen: torch.Generator,
    null_label: int,
    text_dropout_p: float = 0.10,
    stats: DropoutStats | None = None,
) -> Tensor:
    """Flow-matching MSE, averaged over batch and elements.

    Draw order from ``gen``: t, noise, label dropout.
    """
    b = z0.shape[0]
    t = torch.rand(b, generator=gen, dtype=z0.dtype)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    labels, dropped = drop_labels(labels, null_label, text_dropout_p, gen)
    if stats is not None:
        stats.items += b
        stats.cond_dropped += int(dropped.sum())
    z_t = interpolate(z0, eps, t)
    pred = model(z_t, t, labels, skel) if skel is not None else model(z_t, t, labels)
    diff = pred - target_velocity(z0, eps)
    return (diff * diff).mean()


def cfg_velocity(model: VelocityModel, z_t: Tensor, t: Tensor, label: Tensor, null_label: int, w: float,
                 skel: SkeletonBatch | None = None, f_skel: Tensor | None = None) -> Tensor:
    """Guided velocity ``v_null + w (v_cond - v_null)``; the skeleton feeds both branches.

    ``w = 1`` and ``w = 0`` evaluate a single branch so the identities are exact.
    """
    if w < 0:
        raise ValueError("guidance weight must be >= 0")

    def branch(lbl):
        if skel is None:
            return model(z_t, t, lbl)
        return model(z_t, t, lbl, skel, f_skel)

    null = torch.full_like(label, null_label)
    if w == 1:
        return branch(label)
    if w == 0:
        return branch(null)
    v_null = branch(null)
    v_cond = branch(label)
    return v_null + w * (v_cond - v_null)


def initial_noise(shape: Sequence[int], seeds: Sequence[int], dtype=torch.float32) -> Tensor:
    """One independent standard-normal draw per batch item, keyed by its seed."""
    return torch.stack([torch.randn(tuple(shape), generator=torch.Generator().manual_seed(int(s)), dtype=dtype)
                        for s in seeds])


class EulerIntegrator:
    """Uniform-grid Euler from t=1 to t=0, written as anchor minus elapsed time times mean velocity.

    Algebraically ``z <- z - dt * v`` at every step; keeping a running mean of the
    velocities instead of accumulating ``dt * v`` makes a constant field land on
    ``anchor - 1.0 * v`` exactly, whatever the step count.
    """

    def __init__(self, z: Tensor, steps: int):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.steps = steps
        self.restart(z, 0)

    def time(self, k: int) -> float:
        return (self.steps - k) / self.steps

    def restart(self, z: Tensor, k: int) -> None:
        """Re-anchor at ``z`` on grid index ``k`` (time ``time(k)``)."""
        self.anchor, self.k0, self.k = z, k, k
        self.mean: Tensor | None = None
        self.count = 0

    def step(self, v: Tensor) -> Tensor:
        self.count += 1
        self.mean = v if self.mean is None else self.mean + (v - self.mean) / self.count
        self.k += 1
        return self.anchor - ((self.k - self.k0) / self.steps) * self.mean


def _as_labels(label, b: int) -> Tensor:
    return torch.as_tensor(label, dtype=torch.long).reshape(-1).expand(b).clone()


@torch.no_grad()
def sample(
    model: VelocityModel,
    skel: SkeletonBatch | None,
    label,
    config: FlowSampleConfig,
    latent_shape: Sequence[int],
    null_label: int,
    seeds: Sequence[int] | None = None,
    dtype: torch.dtype = torch.float32,
    f_skel: Tensor | None = None,
    z1: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Euler-integrate from t=1 to t=0 on a uniform grid of ``config.steps`` steps.

    The start latent is the seeded Gaussian draw unless ``z1`` is given.
    Returns the latent batch (B, T, C) and its decoded occupancy (B, V, V, V).
    """
    if skel is not None:
        b = skel.batch_size
    else:
        b = 1 if seeds is None else len(seeds)
    seeds = [config.seed] * b if seeds is None else list(seeds)
    z = initial_noise(latent_shape, seeds, dtype) if z1 is None else z1
    labels = _as_labels(label, b)
    if skel is not None and f_skel is None and hasattr(model, "encode"):
        f_skel = model.encode(skel)
    euler = EulerIntegrator(z, config.steps)
    for k in range(config.steps):
        t = torch.full((b,), euler.time(k), dtype=dtype)
        z = euler.step(cfg_velocity(model, z, t, labels, null_label, config.cfg_weight, skel, f_skel))
    return z, decode_latent(z)


def renoise(z_s: Tensor, s: float, t: float, gen: torch.Generator) -> Tensor:
    """Move a sample at time ``s`` forward along the noising path to time ``t > s``."""
    a = (1 - t) / (1 - s)
    sigma = max(t * t - (a * s) ** 2, 0.0) ** 0.5
    return a * z_s + sigma * torch.randn(z_s.shape, generator=gen, dtype=z_s.dtype)


@torch.no_grad()
def repaint_sample(
    model: VelocityModel,
    z0: Tensor,
    mask: np.ndarray,
    skel: SkeletonBatch | None,
    label,
    config: FlowSampleConfig,
    null_label: int,
    seeds: Sequence[int] | None = None,
    f_skel: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Regenerate the masked latent cells of ``z0`` (B, T, C) under a new skeleton.

    Known (unmasked) cells are replaced by a freshly noised copy of ``z0`` before
    every velocity step and by ``z0`` itself at the end.
    """
    b, n_tokens, channels = z0.shape
    mask = np.asarray(mask, dtype=bool)
    d = round(n_tokens ** (1 / 3))
    if mask.shape != (d, d, d):
        raise MaskOutOfBounds(f"mask shape {mask.shape} does not match latent grid {(d, d, d)}")
    editable = torch.from_numpy(mask.reshape(1, n_tokens, 1))
    seeds = [config.seed] * b if seeds is None else list(seeds)
    # same initial draw as sample() so a full mask reproduces it exactly
    z = initial_noise((n_tokens, channels), seeds, z0.dtype)
    gen = torch.Generator().manual_seed(int(seeds[0]) + 0x5EED)
    labels = _as_labels(label, b)
    if skel is not None and f_skel is None and hasattr(model, "encode"):
        f_skel = model.encode(skel)
    euler = EulerIntegrator(z, config.steps)
    for k in range(config.steps):
        t, s = euler.time(k), euler.time(k + 1)
        tt = torch.full((b,), t, dtype=z0.dtype)
        for u in range(config.resample_u):
            known = interpolate(z0, torch.randn(z0.shape, generator=gen, dtype=z0.dtype), t)
            # the integrator state keeps stale values in the known region; only the composite is evaluated
            z_in = torch.where(editable, z, known)
            z = euler.step(cfg_velocity(model, z_in, tt, labels, null_label, config.cfg_weight, skel, f_skel))
            if u + 1 < config.resample_u and s < t:
                z = renoise(torch.where(editable, z, known), s, t, gen)
                euler.restart(z, k)
    z = torch.where(editable, z, z0)
    return z, decode_latent(z)
