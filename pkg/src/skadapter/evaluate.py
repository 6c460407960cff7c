"""Held-out evaluation: conditional generation vs the zeroed-skeleton ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapter import SKAdapterModel
from .data import DatasetSample
from .encoder import collate_skeletons
from .errors import EmptyOccupancy
from .flow import FlowSampleConfig, sample
from .metrics import chamfer, occupancy_iou, rerigging_score, voxel_centers
from .skeleton import Family

# an empty generation scores the largest Chamfer possible inside the unit cube
WORST_CHAMFER = 2 * math.sqrt(3)

MODES = ("conditional", "unconditional", "backbone")
FIELDS = ("id", "family", "mode", "rerigging", "iou", "chamfer_raw")


@dataclass(frozen=True)
class EvalRecord:
    id: int
    family: str
    mode: str
    rerigging: float
    iou: float
    chamfer_raw: float


def score_sample(gen: np.ndarray, truth: DatasetSample) -> tuple[float, float, float]:
    try:
        rr = rerigging_score(gen, truth.skeleton)
        raw = chamfer(voxel_centers(gen), voxel_centers(truth.occupancy))
    except EmptyOccupancy:
        rr = raw = WORST_CHAMFER
    return rr, occupancy_iou(gen, truth.occupancy), raw


@torch.no_grad()
def generate(model: SKAdapterModel, samples: Sequence[DatasetSample], mode: str, config: FlowSampleConfig,
             batch_size: int = 32) -> np.ndarray:
    """One generation per sample; sample ``i`` uses seed ``config.seed + i`` in every mode."""
    cfg = model.config
    shape = (cfg.latent_res**3, cfg.latent_channels)
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        seeds = [config.seed + start + i for i in range(len(chunk))]
        labels = torch.tensor([s.label for s in chunk])
        if mode == "backbone":
            out.append(sample(model.backbone, None, labels, config, shape, cfg.n_labels, seeds, dtype)[1])
            continue
        skel = collate_skeletons([s.skeleton for s in chunk], cfg.d_max, dtype)
        f_skel = model.encode(skel)
        if mode == "unconditional":
            f_skel = torch.zeros_like(f_skel)
        _, occ = sample(model, skel, labels, config, shape, cfg.n_labels, seeds, dtype, f_skel=f_skel)
        out.append(occ)
    return np.concatenate(out)


def evaluate(model: SKAdapterModel, samples: Sequence[DatasetSample], config: FlowSampleConfig,
             modes: Sequence[str] = MODES) -> list[EvalRecord]:
    records = []
    for mode in modes:
        grids = generate(model, samples, mode, config)
        for i, (gen, truth) in enumerate(zip(grids, samples)):
            rr, iou, raw = score_sample(gen, truth)
            records.append(EvalRecord(i, truth.family.name.lower(), mode, rr, iou, raw))
    return records


def summarize(records: Sequence[EvalRecord]) -> dict[tuple[str, str], dict[str, float]]:
    """Mean metrics keyed by (mode, family) with family ``overall`` for all samples."""
    groups: dict[tuple[str, str], list[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.mode, "overall"), []).append(r)
        groups.setdefault((r.mode, r.family), []).append(r)
    return {
        key: {
            "n": len(rs),
            "rerigging": float(np.mean([r.rerigging for r in rs])),
            "iou": float(np.mean([r.iou for r in rs])),
            "chamfer_raw": float(np.mean([r.chamfer_raw for r in rs])),
        }
        for key, rs in groups.items()
    }


def format_report(records: Sequence[EvalRecord]) -> str:
    lines = ["\t".join(FIELDS)]
    for r in records:
        lines.append(f"{r.id}\t{r.family}\t{r.mode}\t{r.rerigging:.6f}\t{r.iou:.6f}\t{r.chamfer_raw:.6f}")
    summary = summarize(records)
    family_order = ["overall"] + [f.name.lower() for f in Family]
    for mode in dict.fromkeys(r.mode for r in records):
        for fam in family_order:
            if (mode, fam) in summary:
                s = summary[(mode, fam)]
                lines.append(f"mean\t{fam}\t{mode}\t{s['rerigging']:.6f}\t{s['iou']:.6f}\t{s['chamfer_raw']:.6f}")
    return "\n".join(lines) + "\n"


def write_report(path, records: Sequence[EvalRecord]) -> None:
    Path(path).write_text(format_report(records), encoding="utf-8")


def read_report(path) -> tuple[list[dict], list[dict]]:
    """Split a report back into per-sample rows and summary rows."""
    rows, means = [], []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    for ln in lines[1:]:
        rec = dict(zip(header, ln.split("\t")))
        (means if rec["id"] == "mean" else rows).append(rec)
    return rows, means
