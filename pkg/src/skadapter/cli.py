"""Command-line entry point: ``skadapter <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` text). Explicit
flags override the file, which overrides built-in defaults. Exit codes are 0
on success, 1 on runtime failure and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from typing import Sequence

import numpy as np
import torch

from .adapter import build_model
from .backbone import Backbone, encode_occupancy, latent_mask_from_voxel_box
from .config import ConfigError, RunConfig, resolve_config
from .data import load_dataset, make_dataset, read_occupancy, write_occupancy, write_point_list
from .encoder import collate_skeletons
from .errors import SKAdapterError
from .evaluate import evaluate, summarize, write_report
from .flow import repaint_sample, sample
from .model_io import load_backbone, load_model, save_backbone, save_model
from .nn_core import ModelConfig, count_params
from .skeleton import Family, read_skeleton
from .train import pretrain_backbone, train_adapter

log = logging.getLogger("skadapter")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _kv(**pairs) -> str:
    return " ".join(f"{k}={v}" for k, v in pairs.items())


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    samples = make_dataset(args.out, cfg.seed, args.n, cfg.data_config())
    hist = Counter(s.family.name.lower() for s in samples)
    occ = float(np.mean([s.occupancy.mean() for s in samples]))
    fams = ",".join(f"{f.name.lower()}:{hist.get(f.name.lower(), 0)}" for f in Family)
    print(_kv(n_samples=len(samples), families=fams, mean_occupancy=f"{occ:.6f}", out=args.out))
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    _, samples = load_dataset(cfg.dataset)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        backbone = Backbone(cfg.model_config())
    hist = pretrain_backbone(backbone, samples, cfg.pretrain_config(), seed=cfg.seed)
    save_backbone(cfg.backbone_ckpt, backbone)
    first = hist.epoch_loss[0] if hist.epoch_loss else float("nan")
    last = hist.epoch_loss[-1] if hist.epoch_loss else float("nan")
    print(_kv(stage="pretrain", epochs=len(hist.epoch_loss), first_loss=f"{first:.6f}", final_loss=f"{last:.6f}",
              out=cfg.backbone_ckpt))
    return 0


def cmd_train_adapter(args, cfg: RunConfig) -> int:
    backbone = load_backbone(cfg.backbone_ckpt)
    if backbone.config != cfg.model_config():
        log.info("stage=train-adapter note=model_config_from_checkpoint")
    _, samples = load_dataset(cfg.dataset)
    val = load_dataset(cfg.heldout)[1] if args.validate else None
    model = build_model(backbone.config, seed=cfg.seed + 1, backbone=backbone)
    hist = train_adapter(model, samples, cfg.train_config(), seed=cfg.seed, val_samples=val)
    save_model(cfg.model_ckpt, model)
    pairs = dict(stage="train-adapter", epochs=len(hist.epoch_loss), steps=hist.steps,
                 cond_dropout=f"{hist.dropout.cond_fraction:.4f}", skeleton_dropped=hist.dropout.skeleton_dropped)
    if hist.val_loss:
        pairs.update(first_val=f"{hist.val_loss[0]:.6f}", final_val=f"{hist.val_loss[-1]:.6f}")
    print(_kv(**pairs, out=cfg.model_ckpt))
    return 0


def _generate(model, skel_path: str, label: int, cfg: RunConfig, seed: int, mask=None, z0=None):
    mc = model.config
    skel = collate_skeletons([read_skeleton(skel_path)], mc.d_max, torch.float32)
    fc = cfg.sample_config(seed)
    shape = (mc.latent_res**3, mc.latent_channels)
    if mask is None:
        return sample(model, skel, label, fc, shape, mc.n_labels, seeds=[seed])[1][0]
    return repaint_sample(model, z0, mask, skel, label, fc, mc.n_labels, seeds=[seed])[1][0]


def _check_label(label: int, config: ModelConfig) -> None:
    if not 0 <= label < config.n_labels:
        raise SKAdapterError(f"label {label} outside [0, {config.n_labels})")


def _write_grid(out: str, occ: np.ndarray, points: str | None) -> None:
    write_occupancy(out, occ)
    if points:
        write_point_list(points, occ)


def cmd_sample(args, cfg: RunConfig) -> int:
    model = load_model(cfg.model_ckpt)
    _check_label(args.label, model.config)
    occ = _generate(model, args.skeleton, args.label, cfg, cfg.seed)
    _write_grid(args.out, occ, args.points)
    print(_kv(stage="sample", occupied=int(occ.sum()), steps=cfg.steps, seed=cfg.seed, out=args.out))
    return 0


def cmd_edit(args, cfg: RunConfig) -> int:
    model = load_model(cfg.model_ckpt)
    _check_label(args.label, model.config)
    grid = read_occupancy(args.input)
    v = model.config.voxel_res
    if grid.shape != (v, v, v):
        raise SKAdapterError(f"input grid {grid.shape} does not match voxel_res {v}")
    mask = latent_mask_from_voxel_box(args.mask, v)
    z0 = encode_occupancy(grid, model.config.latent_channels).unsqueeze(0)
    gen = _generate(model, args.skeleton, args.label, cfg, cfg.seed, mask=mask, z0=z0)
    # composite at voxel level so everything outside the mask footprint is the input verbatim
    footprint = mask.repeat(2, 0).repeat(2, 1).repeat(2, 2)
    out = np.where(footprint, gen, grid)
    _write_grid(args.out, out, args.points)
    print(_kv(stage="edit", masked_cells=int(mask.sum()), changed_voxels=int((out != grid).sum()), out=args.out))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_model(cfg.model_ckpt)
    _, held = load_dataset(cfg.heldout)
    records = evaluate(model, held, cfg.sample_config(), modes=args.modes)
    write_report(cfg.report, records)
    summary = summarize(records)
    for mode in args.modes:
        s = summary[(mode, "overall")]
        print(_kv(stage="eval", mode=mode, n=s["n"], iou=f"{s['iou']:.6f}", rerigging=f"{s['rerigging']:.6f}"))
    return 0


def cmd_count_params(args, cfg: RunConfig) -> int:
    feat = args.F if args.F is not None else cfg.feature_dim
    blocks = args.L if args.L is not None else cfg.n_backbone_blocks
    # head count does not enter the parameter count
    acct = count_params(ModelConfig(feature_dim=feat, n_backbone_blocks=blocks, n_heads=1, d_max=cfg.d_max,
                                    freq_bands=cfg.freq_bands, ffn_multiplier=cfg.ffn_multiplier))
    print(acct.format_table())
    return 0


def cmd_smoke(args, cfg: RunConfig) -> int:
    from .harness import run_smoke

    result = run_smoke(args.workdir, cfg, summary_path=args.summary)
    for name, ok in result.criteria.items():
        print(_kv(criterion=name, status="pass" if ok else "fail"))
    print(_kv(stage="smoke", passed=result.passed, seconds=f"{result.seconds:.1f}"))
    return 0 if result.passed else 1


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skadapter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=_nonneg_int)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--voxel-res", dest="voxel_res", type=_positive_int)
    p.add_argument("--radius", type=float)

    p = add("pretrain", cmd_pretrain, "train and freeze the backbone")
    p.add_argument("--data", dest="dataset")
    p.add_argument("--out", dest="backbone_ckpt")
    p.add_argument("--epochs", dest="pretrain_epochs", type=_nonneg_int)
    p.add_argument("--lr", dest="pretrain_lr", type=float)

    p = add("train-adapter", cmd_train_adapter, "train the skeleton encoder and adapter")
    p.add_argument("--backbone", dest="backbone_ckpt")
    p.add_argument("--data", dest="dataset")
    p.add_argument("--heldout")
    p.add_argument("--out", dest="model_ckpt")
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-validate", dest="validate", action="store_false")

    for name, fn in (("sample", cmd_sample), ("edit", cmd_edit)):
        p = add(name, fn, "generate an occupancy grid" if name == "sample" else "regenerate a box of a grid")
        p.add_argument("--model", dest="model_ckpt")
        p.add_argument("--skeleton", required=True)
        p.add_argument("--label", type=int, default=0)
        p.add_argument("--steps", type=_positive_int)
        p.add_argument("--cfg", dest="cfg_weight", type=float)
        p.add_argument("--out", required=True)
        p.add_argument("--points", help="also write occupied voxel centres as OBJ vertices")
        if name == "edit":
            p.add_argument("--input", required=True)
            p.add_argument("--mask", type=float, nargs=6, required=True, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))

    p = add("eval", cmd_eval, "score generations on a held-out set")
    p.add_argument("--model", dest="model_ckpt")
    p.add_argument("--heldout")
    p.add_argument("--report")
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--modes", nargs="+", default=["conditional", "unconditional"],
                   choices=["conditional", "unconditional", "backbone"])

    p = add("count-params", cmd_count_params, "print the trainable parameter breakdown")
    p.add_argument("--F", type=_positive_int)
    p.add_argument("--L", type=_positive_int)

    p = add("smoke", cmd_smoke, "run the end-to-end harness")
    p.add_argument("--workdir", required=True)
    p.add_argument("--summary", help="machine-readable summary path (default WORKDIR/summary.json)")
    return parser


_CONFIG_KEYS = set(RunConfig.__dataclass_fields__)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr, force=True)
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
    try:
        cfg = resolve_config(args.config, overrides)
    except (ConfigError, OSError) as e:
        print(f"error={type(e).__name__} message={e}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except (SKAdapterError, OSError, ValueError) as e:
        print(f"error={type(e).__name__} command={args.command} message={e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
