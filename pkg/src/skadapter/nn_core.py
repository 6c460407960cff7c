"""Differentiable primitives, parameter bookkeeping and checkpoints.

Tensors are ``torch.Tensor``; autograd supplies reverse-mode gradients and
:func:`grad_check` verifies them with central finite differences. Float64 is
the test/golden mode, float32 the training mode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor, nn

from .errors import (
    CheckpointError,
    IndexOutOfRange,
    NonFiniteGradient,
    NonFiniteValue,
    ShapeMismatch,
)

TEST_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32
LN_EPS = 1e-5
# gradients whose analytic and numerical max-abs both fall below this are treated as
# identically zero (central differences at eps=1e-5 carry ~1e-10 of rounding noise)
ZERO_GRAD_ATOL = 1e-8


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteValue(f"non-finite values in {what}")
    return x


# --- primitives ----------------------------------------------------------------


def linear(weight: Tensor, bias: Tensor | None, x: Tensor) -> Tensor:
    """``y = x W + b`` with ``W`` stored as (F_in, F_out)."""
    if x.shape[-1] != weight.shape[0] or (bias is not None and bias.shape != weight.shape[1:]):
        raise ShapeMismatch(
            f"linear: x {tuple(x.shape)}, W {tuple(weight.shape)}, b {None if bias is None else tuple(bias.shape)}"
        )
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def embedding_lookup(table: Tensor, indices: Tensor) -> Tensor:
    indices = torch.as_tensor(indices, dtype=torch.long, device=table.device)
    if indices.numel() and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexOutOfRange(f"embedding index outside [0, {table.shape[0]})")
    return table[indices]


def layer_norm(scale: Tensor, shift: Tensor, x: Tensor, eps: float = LN_EPS) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * scale + shift


def softmax_rows(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Row softmax over the last axis; ``mask`` (True = keep) removes entries."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    x = x - x.amax(dim=-1, keepdim=True)
    e = torch.exp(x)
    return e / e.sum(dim=-1, keepdim=True)


def biased_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    score_bias: Tensor | None = None,
    value_bias: Tensor | None = None,
    key_mask: Tensor | None = None,
) -> Tensor:
    """Single-head attention with additive score and value biases.

    ``out_i = sum_j softmax_j((q_i . k_j + score_bias_ij) / sqrt(F)) (v_j + value_bias_ij)``

    Shapes: q (..., M, F), k and v (..., N, F), score_bias (..., M, N),
    value_bias (..., M, N, F), key_mask (..., N) or broadcastable to (..., M, N).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    scores = q @ k.transpose(-1, -2)
    if score_bias is not None:
        if score_bias.shape[-2:] != scores.shape[-2:]:
            raise ShapeMismatch(f"score_bias {tuple(score_bias.shape)} vs scores {tuple(scores.shape)}")
        scores = scores + score_bias
    scores = scores / math.sqrt(q.shape[-1])
    if key_mask is not None and key_mask.dim() == scores.dim() - 1:
        key_mask = key_mask.unsqueeze(-2)
    attn = softmax_rows(scores, key_mask)
    out = attn @ v
    if value_bias is not None:
        if value_bias.shape[-3:-1] != scores.shape[-2:]:
            raise ShapeMismatch(f"value_bias {tuple(value_bias.shape)} vs scores {tuple(scores.shape)}")
        out = out + (attn.unsqueeze(-1) * value_bias).sum(dim=-2)
    return out


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, key_mask: Tensor | None = None,
                        fused: bool = True) -> Tensor:
    """Split the feature axis into heads, run scaled dot-product attention, merge.

    ``fused`` routes through torch's fused kernel; ``fused=False`` composes
    :func:`biased_attention` and is kept as the reference path.
    """
    *lead, m, f = q.shape
    n = k.shape[-2]
    if f % n_heads:
        raise ShapeMismatch(f"feature dim {f} not divisible by {n_heads} heads")
    d = f // n_heads

    def split(x, length):
        return x.reshape(*lead, length, n_heads, d).transpose(-2, -3)

    if key_mask is not None:
        key_mask = key_mask.unsqueeze(-2).unsqueeze(-2)  # (..., 1, 1, N)
    qh, kh, vh = split(q, m), split(k, n), split(v, n)
    if fused:
        out = torch.nn.functional.scaled_dot_product_attention(qh, kh, vh, attn_mask=key_mask)
    else:
        out = biased_attention(qh, kh, vh, key_mask=key_mask)
    return out.transpose(-2, -3).reshape(*lead, m, f)


# --- modules -----------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, f_in: int, f_out: int, *, zero_init: bool = False, init_std: float | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(f_in, f_out))
        self.bias = nn.Parameter(torch.zeros(f_out))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            std = init_std if init_std is not None else 1.0 / math.sqrt(f_in)
            nn.init.normal_(self.weight, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return linear(self.weight, self.bias, x)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(self.scale, self.shift, x, self.eps)


class FeedForward(nn.Module):
    def __init__(self, dim: int, multiplier: int = 4):
        super().__init__()
        self.fc1 = Linear(dim, dim * multiplier)
        self.fc2 = Linear(dim * multiplier, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def sinusoidal_features(x: Tensor, n_bands: int) -> Tensor:
    """Per-coordinate ``sin(2^k pi x)``, ``cos(2^k pi x)`` for k < n_bands.

    Output width is ``x.shape[-1] * 2 * n_bands``; layout is
    [sin bands of axis 0, cos bands of axis 0, sin of axis 1, ...].
    """
    freqs = math.pi * 2.0 ** torch.arange(n_bands, dtype=x.dtype, device=x.device)
    ang = x.unsqueeze(-1) * freqs
    feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return feats.reshape(*x.shape[:-1], x.shape[-1] * 2 * n_bands)


# --- configuration and accounting ---------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    n_backbone_blocks: int = 4
    n_heads: int = 4
    ffn_multiplier: int = 4
    d_max: int = 5
    n_relations: int = 6
    n_encoder_units: int = 2
    freq_bands: int = 4
    voxel_res: int = 16
    latent_channels: int = 4
    n_labels: int = 4
    # blocks that carry an adapter hook; empty means every block
    hooked_blocks: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("feature_dim", "n_backbone_blocks", "n_heads", "ffn_multiplier", "d_max", "freq_bands",
                     "voxel_res", "latent_channels", "n_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.feature_dim % self.n_heads:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by n_heads {self.n_heads}")
        if self.n_relations != 6 or self.n_encoder_units != 2:
            raise ValueError("n_relations is fixed at 6 and n_encoder_units at 2")
        if self.voxel_res < 2 or self.voxel_res & (self.voxel_res - 1):
            raise ValueError(f"voxel_res must be a power of two >= 2, got {self.voxel_res}")
        if any(not 0 <= b < self.n_backbone_blocks for b in self.hooked_blocks):
            raise ValueError("hooked_blocks index outside the backbone")

    @property
    def latent_res(self) -> int:
        return self.voxel_res // 2

    @property
    def hooks(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.hooked_blocks))) or tuple(range(self.n_backbone_blocks))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for ln in text.splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            key, _, val = ln.partition("=")
            if key not in names:
                continue  # checkpoints may carry extra run metadata
            if key == "hooked_blocks":
                kwargs[key] = tuple(int(x) for x in val.split(",") if x)
            else:
                kwargs[key] = int(val)
        return cls(**kwargs)


@dataclass(frozen=True)
class AccountingRow:
    layer: str
    per_unit: int
    units: int
    in_inventory: bool = True

    @property
    def total(self) -> int:
        return self.per_unit * self.units


@dataclass(frozen=True)
class ParamAccounting:
    rows: tuple[AccountingRow, ...]
    codebook_params_per_unit: int

    @property
    def total(self) -> int:
        """Trainable total over the adapter inventory rows."""
        return sum(r.total for r in self.rows if r.in_inventory)

    @property
    def total_with_extras(self) -> int:
        return sum(r.total for r in self.rows)

    def row(self, layer: str) -> AccountingRow:
        return next(r for r in self.rows if r.layer == layer)

    def format_table(self) -> str:
        out = [f"{'Layer':<28}{'Count':>7}{'Params/Unit':>14}{'Total':>14}"]
        for r in self.rows:
            if r.in_inventory:
                out.append(f"{r.layer:<28}{'x' + str(r.units):>7}{r.per_unit:>14,}{r.total:>14,}")
        out.append(f"{'Total Trainable':<28}{'':>7}{'':>14}{self.total:>14,}")
        out.append(f"codebooks_per_unit={self.codebook_params_per_unit}")
        for r in self.rows:
            if not r.in_inventory:
                out.append(f"extra {r.layer}: x{r.units} {r.per_unit:,} (outside inventory total)")
        return "\n".join(out)


ROW_TOPO_ATTN = "Topology-Aware Attention"
ROW_FFN = "Feed-Forward Network"
ROW_ENC_LN = "LayerNorms (Encoder)"
ROW_CROSS = "Skeletal Cross-Attention"
ROW_ZERO = "Zero-Initialized Linear"
ROW_ADAPTER_LN = "LayerNorms (Adapter)"
ROW_JOINT_EMBED = "Joint Coordinate Embedding"


def count_params(config: ModelConfig) -> ParamAccounting:
    f = config.feature_dim
    proj = f * f + f
    codebooks = (config.d_max + 1 + config.n_relations) * 3 * f
    hidden = f * config.ffn_multiplier
    n_hooks = len(config.hooks)
    rows = (
        AccountingRow(ROW_TOPO_ATTN, 4 * proj + codebooks, config.n_encoder_units),
        AccountingRow(ROW_FFN, f * hidden + hidden + hidden * f + f, config.n_encoder_units),
        AccountingRow(ROW_ENC_LN, 2 * f, 2 * config.n_encoder_units),
        AccountingRow(ROW_CROSS, 4 * proj, n_hooks),
        AccountingRow(ROW_ZERO, proj, n_hooks),
        AccountingRow(ROW_ADAPTER_LN, 2 * f, 2 * n_hooks),
        AccountingRow(ROW_JOINT_EMBED, 3 * 2 * config.freq_bands * f + f, 1, in_inventory=False),
    )
    return ParamAccounting(rows, codebooks)


# --- parameter store -----------------------------------------------------------


def tensor_hash(t: Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


@dataclass
class ParamEntry:
    tensor: Tensor
    frozen: bool


@dataclass
class ParamStore:
    """Named tensors with frozen flags, iterated in lexicographic name order."""

    entries: dict[str, ParamEntry] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParamStore":
        store = cls()
        for name, p in module.named_parameters(prefix=prefix.rstrip(".")):
            store.add(name, p, frozen=not p.requires_grad)
        return store

    def add(self, name: str, tensor: Tensor, frozen: bool) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.entries[name] = ParamEntry(tensor, frozen)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def items(self):
        for name in self.names():
            yield name, self.entries[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def __len__(self):
        return len(self.entries)

    def trainable_names(self) -> list[str]:
        return [n for n, e in self.items() if not e.frozen]

    def frozen_names(self) -> list[str]:
        return [n for n, e in self.items() if e.frozen]

    def hashes(self, prefix: str = "") -> dict[str, str]:
        return {n: tensor_hash(e.tensor) for n, e in self.items() if n.startswith(prefix)}

    def count(self, prefix: str = "", trainable_only: bool = False) -> int:
        return sum(
            e.tensor.numel() for n, e in self.items() if n.startswith(prefix) and not (trainable_only and e.frozen)
        )


def make_optimizer(params: Iterable[Tensor], lr: float = 1e-4) -> torch.optim.Optimizer:
    """Bias-corrected Adam over the trainable tensors only."""
    params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


# --- checkpoint format -----------------------------------------------------------

CHECKPOINT_MAGIC = b"SKCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, tuple[Tensor, bool]]

    def store(self) -> ParamStore:
        s = ParamStore()
        for name in sorted(self.tensors):
            t, frozen = self.tensors[name]
            s.add(name, t, frozen)
        return s


def encode_checkpoint(config_text: str, store: ParamStore) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", CHECKPOINT_VERSION)
    cfg = config_text.encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    for name, entry in store.items():
        t = entry.tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim())
        out += struct.pack(f"<{t.dim()}I", *t.shape)
        out += struct.pack("<B", int(entry.frozen))
        arr = t.numpy()
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return bytes(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    import numpy as np

    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = take(cfg_len).decode("utf-8")
    tensors: dict[str, tuple[Tensor, bool]] = {}
    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (frozen,) = struct.unpack("<B", take(1))
        np_dtype = np.dtype("<f4" if code == 0 else "<f8")
        count = math.prod(dims)
        arr = np.frombuffer(take(count * np_dtype.itemsize), dtype=np_dtype).reshape(dims)
        tensors[name] = (torch.from_numpy(arr.astype(np_dtype.newbyteorder("="))), bool(frozen))
    return Checkpoint(config_text, tensors)


def save_checkpoint(path, config_text: str, store: ParamStore) -> None:
    Path(path).write_bytes(encode_checkpoint(config_text, store))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --- gradient checking --------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float, entries: Tensor | None = None) -> Tensor:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place).

    ``entries`` restricts the work to those flat indices; the rest of the result is zero.
    """
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    index = range(flat.numel()) if entries is None else entries.tolist()
    with torch.no_grad():
        for i in index:
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    The output of ``fn(*inputs)`` is reduced to a scalar via a fixed random
    projection. Only floating-point inputs listed in ``wrt`` (default: all
    float64 inputs) are checked. The relative error of one input is
    ``max|g_a - g_n| / max(max|g_a|, max|g_n|)``; inputs whose gradients both
    stay below ``ZERO_GRAD_ATOL`` count as 0.
    """
    inputs = [x.detach().clone() if isinstance(x, Tensor) else x for x in inputs]
    if wrt is None:
        wrt = [i for i, x in enumerate(inputs) if isinstance(x, Tensor) and x.dtype == TEST_DTYPE]
    for i in wrt:
        if inputs[i].dtype != TEST_DTYPE:
            raise TypeError("grad_check runs in double precision only")
        inputs[i].requires_grad_(True)

    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar():
        return (fn(*inputs) * proj).sum()

    analytic = torch.autograd.grad((out * proj).sum(), [inputs[i] for i in wrt], allow_unused=True)
    worst = 0.0
    for i, ga in zip(wrt, analytic):
        if ga is None:
            ga = torch.zeros_like(inputs[i])
        if not torch.isfinite(ga).all():
            raise NonFiniteGradient(f"analytic gradient of input {i} is not finite")
        gn = numerical_grad(scalar, inputs[i].data, eps)
        if not torch.isfinite(gn).all():
            raise NonFiniteGradient(f"numerical gradient of input {i} is not finite")
        scale = max(ga.abs().max().item(), gn.abs().max().item())
        if scale < ZERO_GRAD_ATOL:
            continue
        worst = max(worst, (ga - gn).abs().max().item() / scale)
    return worst


def module_grad_check(module: nn.Module, fn: Callable[[], Tensor], eps: float = 1e-5, seed: int = 0,
                      names: Sequence[str] | None = None, max_entries: int | None = None) -> float:
    """Like :func:`grad_check` but over a module's (trainable) parameters.

    ``max_entries`` caps the finite-difference work per tensor to a random
    subset of its entries; analytic and numerical gradients are compared on
    that subset only.
    """
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    if names is not None:
        params = {n: params[n] for n in names}
    out = fn()
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    analytic = torch.autograd.grad((out * proj).sum(), list(params.values()), allow_unused=True)
    worst = 0.0
    for (name, p), ga in zip(params.items(), analytic):
        if ga is None:
            ga = torch.zeros_like(p)
        entries = None
        if max_entries is not None and p.numel() > max_entries:
            entries = torch.randperm(p.numel(), generator=gen)[:max_entries]
        gn = numerical_grad(lambda: (fn() * proj).sum(), p.data, eps, entries)
        if entries is not None:
            ga, gn = ga.reshape(-1)[entries], gn.reshape(-1)[entries]
        if not (torch.isfinite(ga).all() and torch.isfinite(gn).all()):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        scale = max(ga.abs().max().item(), gn.abs().max().item())
        if scale >= ZERO_GRAD_ATOL:
            worst = max(worst, (ga - gn).abs().max().item() / scale)
    return worst
