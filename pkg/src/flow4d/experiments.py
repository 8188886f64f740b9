"""Training jobs and the ablation matrix (fusion modes x flow losses x directions)."""
from __future__ import annotations

import itertools
import logging
import math
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .config import Config
from .evaluation import MetricsReport, evaluate_predictor, mean_metrics, write_table
from .fusion import FUSION_MODES
from .losses import DIRECTIONS
from .model import ModelPredictor
from .synthetic import PointCloudSequence
from .trainer import Trainer

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("IoU", "Chamfer", "Corres.", "runtime")
TABLE_COLUMNS = ("variant",) + REPORT_COLUMNS


@dataclass
class JobResult:
    config: Config
    trainer: Trainer
    reports: list[MetricsReport]
    train_seconds: float
    eval_seconds: float

    @property
    def metrics(self) -> dict[str, float]:
        return mean_metrics(self.reports)

    def row(self, label: str) -> dict[str, Any]:
        m = self.metrics
        return {"variant": label, "IoU": m["iou"], "Chamfer": m["chamfer"], "Corres.": m["correspondence"],
                "runtime": self.train_seconds + self.eval_seconds, "flow_epe": m["flow_epe"],
                "gt_displacement": m["gt_displacement"], "iterations": self.trainer.state.iteration}


def run_job(config: Config, train_set: Sequence[PointCloudSequence],
            eval_set: Sequence[PointCloudSequence] | None = None, out_dir: str | Path | None = None,
            max_iters: int | None = None) -> JobResult:
    """Train on ``train_set`` (validating on ``eval_set`` at ``val_every``),
    then evaluate the final model on ``eval_set``."""
    eval_set = list(eval_set or train_set)
    trainer = Trainer(config, out_dir=out_dir)
    start = time.perf_counter()
    trainer.fit(train_set, None, max_iters=max_iters)
    train_seconds = time.perf_counter() - start
    start = time.perf_counter()
    ex, ev = config.extraction, config.eval
    predictor = ModelPredictor(trainer.model)
    reports = [evaluate_predictor(predictor, seq, ex.tau, ex.start_res, ex.upsample_steps, ev.n_samples,
                                  ev.iou_samples, ev.seed)[0] for seq in eval_set]
    return JobResult(config, trainer, reports, train_seconds, time.perf_counter() - start)


def cell_label(cell: dict[str, str]) -> str:
    return "/".join(cell[k] for k in ("fusion.mode", "loss.flow_variant", "loss.directions"))


def ablation_cells(fusion_modes: Sequence[str] = FUSION_MODES, flow_variants: Sequence[str] = ("chamfer",),
                   directions: Sequence[str] = DIRECTIONS) -> list[dict[str, str]]:
    return [{"fusion.mode": f, "loss.flow_variant": v, "loss.directions": d}
            for f, v, d in itertools.product(fusion_modes, flow_variants, directions)]


def run_ablation(base: Config, train_set, eval_set=None, cells: Sequence[dict[str, str]] | None = None,
                 out_dir: str | Path | None = None, max_iters: int | None = None) -> list[dict[str, Any]]:
    """One row per cell; a failing cell is recorded with its error and the
    matrix continues."""
    cells = list(cells or ablation_cells())
    rows = []
    for cell in cells:
        label = cell_label(cell)
        cell_dir = Path(out_dir) / label.replace("/", "__") if out_dir is not None else None
        start = time.perf_counter()
        try:
            result = run_job(base.with_overrides(cell), train_set, eval_set, cell_dir, max_iters)
            row = result.row(label)
        except Exception as exc:  # recorded, matrix continues
            log.error("ablation cell %s failed: %s", label, exc)
            row = {"variant": label, "IoU": math.nan, "Chamfer": math.nan, "Corres.": math.nan,
                   "runtime": time.perf_counter() - start, "error": f"{type(exc).__name__}: {exc}",
                   "traceback": traceback.format_exc()}
        rows.append(row)
        if out_dir is not None:
            write_table(out_dir, "ablation", rows, TABLE_COLUMNS)
    return rows


def format_table(rows: Sequence[dict[str, Any]], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    def fmt(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.4f}"
        return str(v)
    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
