"""Reconstruction and flow metrics, per-sequence reports and the resolution study.

Metrics:

* volumetric IoU, Monte Carlo over uniform samples of a box;
* Chamfer distance, the mean of accuracy (pred -> gt) and completeness
  (gt -> pred) over area-weighted surface samples;
* correspondence l2: predicted surface points are advected by the predicted
  flow (looked up from the nearest input point) and compared with where the
  ground-truth motion carries their nearest ground-truth surface point.
"""
from __future__ import annotations

import csv
import json
import math
import time as _time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .geometry import CUBE_MAX, CUBE_MIN, NearestNeighborIndex, TriangleMesh, points_in_mesh, sample_surface
from .synthetic import (DeformingShape, PointCloudSequence, correspondence_displacement,
                        random_shape, sample_surface_sequence)

SCHEMA_VERSION = 1
Indicator = Callable[[np.ndarray], np.ndarray]


def _as_indicator(x) -> Indicator:
    if isinstance(x, TriangleMesh):
        if x.is_empty:
            return lambda p: np.zeros(len(p), dtype=bool)
        return lambda p: points_in_mesh(x, p)
    return x


def volumetric_iou(pred_inside, gt_inside, bounds=(CUBE_MIN, CUBE_MAX), n_samples: int = 100000,
                   seed: int = 0) -> float:
    """``pred_inside`` / ``gt_inside``: callables on (M, 3) arrays or meshes.
    ``bounds`` is (lo, hi) for a cube or a pair of 3-vectors for a box."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), 3) for b in bounds)
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(n_samples, 3))
    a = np.asarray(_as_indicator(pred_inside)(pts), dtype=bool)
    b = np.asarray(_as_indicator(gt_inside)(pts), dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def chamfer_points(pred_points, gt_points) -> tuple[float, float]:
    """(accuracy, completeness) mean nearest-neighbour distances."""
    acc = NearestNeighborIndex(gt_points).query(pred_points)[1].mean()
    comp = NearestNeighborIndex(pred_points).query(gt_points)[1].mean()
    return float(acc), float(comp)


def chamfer_metric(pred_mesh: TriangleMesh, gt_mesh: TriangleMesh, n_samples: int = 10000, seed: int = 0) -> float:
    if pred_mesh.is_empty:
        raise ValueError("empty prediction")
    if gt_mesh.is_empty:
        raise ValueError("empty ground truth")
    # both meshes are sampled with the same seed, so identical meshes score exactly 0
    p = sample_surface(pred_mesh, n_samples, np.random.default_rng(seed))[0]
    g = sample_surface(gt_mesh, n_samples, np.random.default_rng(seed))[0]
    return 0.5 * sum(chamfer_points(p, g))


def nearest_input_flow(input_points, flows) -> Callable[[np.ndarray], np.ndarray]:
    """Flow at arbitrary points = flow of the nearest input point."""
    index = NearestNeighborIndex(input_points)
    flows = np.asarray(flows, dtype=np.float64)
    if len(flows) != len(index):
        raise ValueError("one flow vector per input point required")
    return lambda q: flows[index.query(q)[0]]


def flow_at_vertices(vertices, input_points, flows) -> np.ndarray:
    return nearest_input_flow(input_points, flows)(vertices)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Ground-truth surface points at t and their images at t+1."""
    points: np.ndarray
    points_next: np.ndarray

    @classmethod
    def from_shape(cls, shape: DeformingShape, t: float, t_next: float, n: int, seed: int = 0):
        rest = shape.canonical_surface(n, np.random.default_rng(seed))
        return cls(shape.deform(rest, t), shape.deform(rest, t_next))


def correspondence_l2(pred_mesh: TriangleMesh, flow, gt: CorrespondenceSet, n_samples: int = 10000,
                      seed: int = 0, mode: str = "correspondence") -> float:
    """Mean l2 error of predicted-surface samples advected by ``flow``.

    ``flow`` is a callable giving vectors at points, or an array with one
    vector per sample (samples are drawn from ``pred_mesh`` with ``seed``).
    ``mode="correspondence"`` compares against the ground-truth image of the
    nearest ground-truth point (shifted by the sample's offset from it);
    ``mode="surface"`` takes the distance to the nearest ground-truth point
    at t+1.
    """
    if pred_mesh.is_empty:
        raise ValueError("empty prediction")
    samples = sample_surface(pred_mesh, n_samples, np.random.default_rng(seed))[0]
    vectors = flow(samples) if callable(flow) else np.asarray(flow, dtype=np.float64)
    if vectors.shape != samples.shape:
        raise ValueError(f"flow count mismatch: {len(vectors)} vectors for {len(samples)} samples")
    advected = samples + vectors
    if mode == "surface":
        return float(NearestNeighborIndex(gt.points_next).query(advected)[1].mean())
    if mode != "correspondence":
        raise ValueError(f"unknown correspondence mode {mode!r}")
    idx = NearestNeighborIndex(gt.points).query(samples)[0]
    target = samples + (gt.points_next[idx] - gt.points[idx])
    return float(np.linalg.norm(advected - target, axis=1).mean())


# ---------------------------------------------------------------------------
# reports


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None and np.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


@dataclass
class MetricsReport:
    name: str
    iou: list[float]
    chamfer: list[float]
    correspondence: list[float]
    flow_epe: list[float]
    gt_displacement: list[float]
    n_samples: int
    iou_samples: int
    seed: int
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def mean_iou(self) -> float:
        return _mean(self.iou)

    @property
    def mean_chamfer(self) -> float:
        return _mean(self.chamfer)

    @property
    def mean_correspondence(self) -> float:
        return _mean(self.correspondence)

    @property
    def mean_flow_epe(self) -> float:
        return _mean(self.flow_epe)

    @property
    def mean_gt_displacement(self) -> float:
        return _mean(self.gt_displacement)

    def summary(self) -> dict[str, float]:
        return {"iou": self.mean_iou, "chamfer": self.mean_chamfer, "correspondence": self.mean_correspondence,
                "flow_epe": self.mean_flow_epe, "gt_displacement": self.mean_gt_displacement}

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mean"] = self.summary()
        d["schema_version"] = SCHEMA_VERSION
        return _json_safe(d)


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _eval_box(shape: DeformingShape, t: float, mesh: TriangleMesh, pad: float = 0.02):
    m = shape.extent(t)
    if not mesh.is_empty:
        m = max(m, float(np.abs(mesh.vertices).max()))
    m = min(m + pad, CUBE_MAX)
    return (-m, m)


def evaluate_sequence(prediction, meshes: Sequence[TriangleMesh], n_samples: int = 10000,
                      iou_samples: int = 100000, seed: int = 0) -> MetricsReport:
    """Metrics of one SequencePrediction against its analytic shape, given the
    meshes extracted from it (one per frame)."""
    seq: PointCloudSequence = prediction.sequence
    shape = seq.shape
    if shape is None:
        raise ValueError("evaluation needs the sequence's generating shape")
    if len(meshes) != seq.n_frames:
        raise ValueError("one mesh per frame required")
    iou, cd, corr, epe, disp = [], [], [], [], []
    for t, mesh in enumerate(meshes):
        time = float(seq.times[t])
        fseed = seed + 7919 * t
        iou.append(volumetric_iou(mesh, lambda p, time=time: shape.indicator(p, time),
                                  _eval_box(shape, time, mesh), iou_samples, fseed))
        gt_pts = shape.surface_points(n_samples, time, np.random.default_rng(fseed + 1))
        if mesh.is_empty:
            cd.append(float("nan"))
        else:
            pred_pts = sample_surface(mesh, n_samples, np.random.default_rng(fseed + 2))[0]
            cd.append(0.5 * sum(chamfer_points(pred_pts, gt_pts)))
        if t + 1 < seq.n_frames:
            t_next = float(seq.times[t + 1])
            gt_flow = correspondence_displacement(shape, seq.points[t], time, t_next)
            pred_flow = prediction.flows[t]
            epe.append(float(np.linalg.norm(pred_flow - gt_flow, axis=1).mean()))
            disp.append(float(np.linalg.norm(gt_flow, axis=1).mean()))
            if mesh.is_empty:
                corr.append(float("nan"))
            else:
                gt = CorrespondenceSet.from_shape(shape, time, t_next, n_samples, fseed + 3)
                corr.append(correspondence_l2(mesh, nearest_input_flow(seq.points[t], pred_flow), gt,
                                              n_samples, fseed + 4))
    return MetricsReport(seq.name, iou, cd, corr, epe, disp, n_samples, iou_samples, seed)


def evaluate_predictor(predictor, sequence: PointCloudSequence, tau: float = 0.5, start_res: int = 32,
                       upsample_steps: int = 2, n_samples: int = 10000, iou_samples: int = 100000,
                       seed: int = 0) -> tuple[MetricsReport, list[TriangleMesh]]:
    from .extraction import extract_sequence

    prediction = predictor(sequence)
    meshes = extract_sequence(prediction, tau, start_res, upsample_steps)
    return evaluate_sequence(prediction, meshes, n_samples, iou_samples, seed), meshes


def mean_metrics(reports: Sequence[MetricsReport]) -> dict[str, float]:
    keys = ("iou", "chamfer", "correspondence", "flow_epe", "gt_displacement")
    return {k: _mean([r.summary()[k] for r in reports]) for k in keys}


def write_reports(directory: str | Path, reports: Sequence[MetricsReport], extra: dict | None = None) -> dict:
    """metrics.json (per-frame arrays + means) and metrics.csv (one row per sequence)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "sequences": [r.to_dict() for r in reports],
           "mean": _json_safe(mean_metrics(reports)), **(extra or {})}
    (directory / "metrics.json").write_text(json.dumps(doc, indent=2))
    with open(directory / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "iou", "chamfer", "correspondence", "flow_epe", "gt_displacement"])
        for r in reports:
            s = r.summary()
            w.writerow([r.name] + [s[k] for k in ("iou", "chamfer", "correspondence", "flow_epe",
                                                  "gt_displacement")])
    return doc


METRICS_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "sequences", "mean"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mean": {"type": "object", "required": ["iou", "chamfer", "correspondence"]},
        "sequences": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "iou", "chamfer", "correspondence", "n_samples", "seed", "mean"],
                "properties": {
                    "iou": {"type": "array", "items": {"type": ["number", "null"]}},
                    "chamfer": {"type": "array", "items": {"type": ["number", "null"]}},
                    "correspondence": {"type": "array", "items": {"type": ["number", "null"]}},
                    "n_samples": {"type": "integer"},
                    "seed": {"type": "integer"},
                },
            },
        },
    },
}


# ---------------------------------------------------------------------------
# resolution study

STUDY_POINT_COUNTS = (50, 100, 300, 500, 1000)
STUDY_TEMPORAL_MODES = ("even", "uneven")
STUDY_COLUMNS = ("kind", "n_points", "temporal_mode", "iou", "chamfer", "correspondence", "flow_epe",
                 "n_samples", "iou_samples", "n_sequences", "seconds")


def resolution_study(predictor, kind: str, point_counts: Sequence[int] = STUDY_POINT_COUNTS,
                     temporal_modes: Sequence[str] = STUDY_TEMPORAL_MODES, n_sequences: int = 1,
                     n_frames: int = 8, noise_sigma: float = 0.0, seed: int = 0, tau: float = 0.5,
                     start_res: int = 16, upsample_steps: int = 1, n_samples: int = 2000,
                     iou_samples: int = 20000, shape: DeformingShape | None = None) -> list[dict[str, Any]]:
    """Metrics over a grid of input point counts and temporal sampling modes.

    The same shapes are used in every cell so rows differ only in sampling.
    """
    rng = np.random.default_rng(seed)
    shapes = [shape] if shape is not None else [random_shape(kind, rng, n_frames) for _ in range(n_sequences)]
    rows = []
    for mode in temporal_modes:
        for n in point_counts:
            start = _time.perf_counter()
            reports = []
            for j, sh in enumerate(shapes):
                seq = sample_surface_sequence(sh, n, mode, noise_sigma, seed + j)
                seq.name = f"{kind}_{j:04d}"
                reports.append(evaluate_predictor(predictor, seq, tau, start_res, upsample_steps, n_samples,
                                                  iou_samples, seed)[0])
            m = mean_metrics(reports)
            rows.append({"kind": kind, "n_points": int(n), "temporal_mode": mode, "iou": m["iou"],
                         "chamfer": m["chamfer"], "correspondence": m["correspondence"],
                         "flow_epe": m["flow_epe"], "n_samples": n_samples, "iou_samples": iou_samples,
                         "n_sequences": len(shapes), "seconds": _time.perf_counter() - start})
    return rows


def write_table(directory: str | Path, stem: str, rows: Sequence[dict[str, Any]],
                columns: Sequence[str] | None = None) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    jpath, cpath = directory / f"{stem}.json", directory / f"{stem}.csv"
    jpath.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "columns": columns,
                                 "rows": _json_safe(list(rows))}, indent=2))
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return jpath, cpath


__all__ = [
    "volumetric_iou", "chamfer_points", "chamfer_metric", "nearest_input_flow", "flow_at_vertices",
    "CorrespondenceSet", "correspondence_l2", "MetricsReport", "evaluate_sequence", "evaluate_predictor",
    "mean_metrics", "write_reports", "METRICS_SCHEMA", "resolution_study", "write_table",
]
