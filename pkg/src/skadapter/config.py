"""Flat ``key=value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .data import DataConfig
from .flow import FlowSampleConfig, TrainConfig
from .nn_core import ModelConfig


class ConfigError(ValueError):
    """Malformed config file or unknown key."""


@dataclass(frozen=True)
class RunConfig:
    # model
    feature_dim: int = 64
    n_backbone_blocks: int = 4
    n_heads: int = 4
    ffn_multiplier: int = 4
    d_max: int = 5
    freq_bands: int = 4
    voxel_res: int = 16
    latent_channels: int = 4
    n_labels: int = 4
    # data
    radius: float = 1.5
    min_joints: int = 4
    max_joints: int = 12
    # backbone pretraining
    pretrain_epochs: int = 15
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 8
    # adapter training
    batch_size: int = 4
    epochs: int = 80
    lr: float = 1e-3
    text_dropout_p: float = 0.10
    # sampling
    steps: int = 25
    cfg_weight: float = 3.0
    resample_u: int = 1
    # paths
    dataset: str = "train.tms"
    heldout: str = "heldout.tms"
    backbone_ckpt: str = "backbone.skck"
    model_ckpt: str = "model.skck"
    report: str = "report.tsv"
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim,
            n_backbone_blocks=self.n_backbone_blocks,
            n_heads=self.n_heads,
            ffn_multiplier=self.ffn_multiplier,
            d_max=self.d_max,
            freq_bands=self.freq_bands,
            voxel_res=self.voxel_res,
            latent_channels=self.latent_channels,
            n_labels=self.n_labels,
        )

    def data_config(self) -> DataConfig:
        return DataConfig(voxel_res=self.voxel_res, radius=self.radius, min_joints=self.min_joints,
                          max_joints=self.max_joints)

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.pretrain_batch_size, epochs=self.pretrain_epochs, lr=self.pretrain_lr,
                           text_dropout_p=self.text_dropout_p)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           text_dropout_p=self.text_dropout_p)

    def sample_config(self, seed: int | None = None) -> FlowSampleConfig:
        return FlowSampleConfig(steps=self.steps, cfg_weight=self.cfg_weight,
                                seed=self.seed if seed is None else seed, resample_u=self.resample_u)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


FIELD_TYPES: dict[str, type] = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = FIELD_TYPES[key]
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from e


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (``None`` values ignored)."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value)
    return dataclasses.replace(RunConfig(), **values)
