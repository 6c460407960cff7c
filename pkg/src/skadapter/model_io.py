"""Save and restore backbones and composites through the SKCK checkpoint format."""

from __future__ import annotations

import torch
from torch import nn

from .adapter import SKAdapterModel, build_model
from .backbone import Backbone
from .errors import CheckpointError, FrozenViolation
from .nn_core import Checkpoint, ModelConfig, ParamStore, load_checkpoint, save_checkpoint

STAGE_PRETRAIN = "pretrain"
STAGE_ADAPTER = "adapter"


def _config_text(config: ModelConfig, stage: str) -> str:
    return config.to_text() + f"stage={stage}\n"


def _stage(ckpt: Checkpoint) -> str:
    for ln in ckpt.config_text.splitlines():
        if ln.startswith("stage="):
            return ln.partition("=")[2]
    return ""


def _load_into(module: nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    state = {name[len(prefix):]: t for name, (t, _) in ckpt.tensors.items() if name.startswith(prefix)}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint mismatch under {prefix!r}: missing={missing} unexpected={unexpected}")


def save_backbone(path, backbone: Backbone) -> None:
    """Write every backbone tensor with its frozen flag set."""
    store = ParamStore()
    for name, p in backbone.named_parameters(prefix="backbone"):
        store.add(name, p, frozen=True)
    save_checkpoint(path, _config_text(backbone.config, STAGE_PRETRAIN), store)


def load_backbone(path) -> Backbone:
    ckpt = load_checkpoint(path)
    if _stage(ckpt) != STAGE_PRETRAIN:
        raise CheckpointError(f"{path} is not a pretrained backbone checkpoint")
    not_frozen = [n for n, (_, frozen) in ckpt.tensors.items() if n.startswith("backbone.") and not frozen]
    if not_frozen:
        raise FrozenViolation(f"backbone tensors not flagged frozen: {not_frozen[:3]}")
    config = ModelConfig.from_text(ckpt.config_text)
    backbone = Backbone(config)
    _load_into(backbone, ckpt, "backbone.")
    backbone.requires_grad_(False)
    return backbone.eval()


def save_model(path, model: SKAdapterModel) -> None:
    save_checkpoint(path, _config_text(model.config, STAGE_ADAPTER), ParamStore.from_module(model))


def load_model(path, dtype: torch.dtype = torch.float32) -> SKAdapterModel:
    ckpt = load_checkpoint(path)
    if _stage(ckpt) != STAGE_ADAPTER:
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    config = ModelConfig.from_text(ckpt.config_text)
    model = build_model(config, dtype=dtype)
    _load_into(model, ckpt, "")
    flags = {n: frozen for n, (_, frozen) in ckpt.tensors.items()}
    if any(flags[n] != n.startswith("backbone.") for n in flags):
        raise FrozenViolation("checkpoint frozen flags disagree with the backbone/adapter split")
    return model.eval()
