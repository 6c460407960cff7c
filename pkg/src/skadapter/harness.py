"""End-to-end smoke harness: gen-data -> pretrain -> train-adapter -> eval, then the acceptance checks."""

from __future__ import annotations

import contextlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig

log = logging.getLogger(__name__)

TRAIN_SIZE = 256
HELDOUT_SIZE = 32
HELDOUT_SEED_OFFSET = 1000


class StageFailure(RuntimeError):
    def __init__(self, stage: str, reason: str):
        super().__init__(f"stage {stage} failed: {reason}")
        self.stage = stage


@dataclass
class PipelineResult:
    workdir: Path
    summary: dict
    stage_seconds: dict[str, float]


@dataclass
class SmokeResult:
    criteria: dict[str, bool]
    details: dict[str, str]
    seconds: float
    summary_path: Path
    pipeline: PipelineResult | None = None
    failed_stage: str | None = None

    @property
    def passed(self) -> bool:
        return self.failed_stage is None and all(self.criteria.values())


def _cli(stage: str, argv: list[str]) -> None:
    from .cli import main

    err = io.StringIO()
    with contextlib.redirect_stderr(err):
        code = main(argv)
    if code != 0:
        lines = err.getvalue().strip().splitlines()
        raise StageFailure(stage, f"exit code {code}" + (f": {lines[-1]}" if lines else ""))


def _config_file(workdir: Path, cfg: RunConfig) -> Path:
    paths = dict(dataset=workdir / "train.tms", heldout=workdir / "heldout.tms",
                 backbone_ckpt=workdir / "backbone.skck", model_ckpt=workdir / "model.skck",
                 report=workdir / "report.tsv")
    text = "".join(f"{k}={v}\n" for k, v in paths.items())
    keep = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__ if k not in paths}
    text += "".join(f"{k}={v}\n" for k, v in keep.items())
    path = workdir / "run.cfg"
    path.write_text("# generated by the smoke harness\n" + text, encoding="utf-8")
    return path


def run_pipeline(workdir: str | Path, cfg: RunConfig = RunConfig(),
                 modes: tuple[str, ...] = ("conditional", "unconditional"),
                 train_size: int = TRAIN_SIZE, heldout_size: int = HELDOUT_SIZE,
                 start_at: str | None = None) -> PipelineResult:
    """Chain the CLI stages inside ``workdir``; any failure raises :class:`StageFailure`.

    ``start_at`` resumes from the named stage, reusing files already in ``workdir``.
    """
    from .evaluate import read_report

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    conf = str(_config_file(workdir, cfg))
    seconds: dict[str, float] = {}
    stages = [
        ("gen-data", ["gen-data", "--config", conf, "--n", str(train_size), "--out", str(workdir / "train.tms")]),
        ("gen-heldout", ["gen-data", "--config", conf, "--n", str(heldout_size), "--seed",
                         str(cfg.seed + HELDOUT_SEED_OFFSET), "--out", str(workdir / "heldout.tms")]),
        ("pretrain", ["pretrain", "--config", conf]),
        ("train-adapter", ["train-adapter", "--config", conf]),
        ("eval", ["eval", "--config", conf, "--modes", *modes]),
    ]
    names = [name for name, _ in stages]
    if start_at is not None:
        if start_at not in names:
            raise ValueError(f"unknown stage {start_at!r}; stages are {names}")
        stages = stages[names.index(start_at):]
    for stage, argv in stages:
        start = time.perf_counter()
        log.info("stage=%s status=start", stage)
        _cli(stage, argv)
        seconds[stage] = time.perf_counter() - start
        log.info("stage=%s status=done seconds=%.1f", stage, seconds[stage])
    _, means = read_report(workdir / "report.tsv")
    summary = {(m["mode"], m["family"]): {"iou": float(m["iou"]), "rerigging": float(m["rerigging"]),
                                          "chamfer_raw": float(m["chamfer_raw"])} for m in means}
    return PipelineResult(workdir, summary, seconds)


def run_smoke(workdir: str | Path, cfg: RunConfig = RunConfig(), summary_path: str | Path | None = None,
              include_slow: bool = True, train_size: int = TRAIN_SIZE,
              heldout_size: int = HELDOUT_SIZE) -> SmokeResult:
    """Run the pipeline, then every acceptance check, and write a JSON summary."""
    from . import acceptance

    start = time.perf_counter()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    summary_path = Path(summary_path) if summary_path else workdir / "summary.json"
    criteria: dict[str, bool] = {}
    details: dict[str, str] = {}
    pipeline = None
    failed = None
    try:
        t0 = time.perf_counter()
        pipeline = run_pipeline(workdir / "run", cfg, train_size=train_size, heldout_size=heldout_size)
        elapsed = time.perf_counter() - t0
        cond, unc = pipeline.summary[("conditional", "overall")], pipeline.summary[("unconditional", "overall")]
        gap = cond["iou"] - unc["iou"]
        criteria["8"] = gap >= acceptance.IOU_GAP_MIN and cond["rerigging"] < unc["rerigging"] and elapsed < 1200
        details["8"] = (f"gap={gap:.4f} cond_rerig={cond['rerigging']:.4f} unc_rerig={unc['rerigging']:.4f} "
                        f"seconds={elapsed:.0f}")
    except StageFailure as e:
        failed = e.stage
        criteria["8"] = False
        details["8"] = str(e)
    for number, check in acceptance.CHECKS.items():
        if number == 8 or (not include_slow and number in (5, 6)):
            continue
        res = check()
        criteria[str(number)] = res.passed
        details[str(number)] = res.detail
    seconds = time.perf_counter() - start
    payload = {
        "passed": failed is None and all(criteria.values()),
        "failed_stage": failed,
        "seed": cfg.seed,
        "seconds": round(seconds, 1),
        "criteria": {k: {"passed": criteria[k], "detail": details[k]} for k in sorted(criteria, key=int)},
        "stage_seconds": pipeline.stage_seconds if pipeline else {},
    }
    summary_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return SmokeResult(criteria, details, seconds, summary_path, pipeline, failed)
