"""Joint training loop: batching, sampling, direction handling, validation,
checkpoints and resume."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .config import Config
from .layers import ParamStore, adam_step, config_hash, learning_rate, load_checkpoint, save_checkpoint
from .losses import flow_loss, recon_loss_bce_logits, reduce_over_time
from .model import JointModel, ModelPredictor, reverse_spatial, reverse_time
from .synthetic import PointCloudSequence, correspondence_displacement, sample_occupancy_queries

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, sequence_ids: Sequence[str], dump_path: Path | None = None):
        super().__init__(message)
        self.sequence_ids = list(sequence_ids)
        self.dump_path = dump_path


@dataclass
class TrainState:
    iteration: int = 0
    best_iou: float = -math.inf
    best_iteration: int = -1
    bad_validations: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)   # validation metrics
    loss_trace: list[dict[str, float]] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def to_meta(self) -> dict[str, Any]:
        return {"iteration": self.iteration, "best_iou": self.best_iou if math.isfinite(self.best_iou) else None,
                "best_iteration": self.best_iteration, "bad_validations": self.bad_validations,
                "history": self.history, "rng_state": self.rng.bit_generator.state}

    @classmethod
    def from_meta(cls, meta: dict[str, Any]) -> "TrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        best = meta.get("best_iou")
        return cls(int(meta["iteration"]), -math.inf if best is None else float(best),
                   int(meta.get("best_iteration", -1)), int(meta.get("bad_validations", 0)),
                   list(meta.get("history", [])), [], rng)


@dataclass
class Batch:
    points: torch.Tensor       # (B, T, N, 3)
    times: torch.Tensor        # (B, T)
    trajectories: torch.Tensor  # (B, K) indices into N
    queries: torch.Tensor      # (B, T, M, 3)
    labels: torch.Tensor       # (B, T, M)
    gt_flow: torch.Tensor | None  # (B, T-1, K, 3) for supervised flow
    names: list[str]


def make_batch(sequences: Sequence[PointCloudSequence], config: Config, rng: np.random.Generator,
               dtype=torch.float32) -> Batch:
    tc = config.train
    n_points = {s.n_points for s in sequences}
    n_frames = {s.n_frames for s in sequences}
    if len(n_points) != 1 or len(n_frames) != 1:
        raise ValueError("sequences in a batch must share frame and point counts")
    N = n_points.pop()
    K = min(tc.n_flow_trajectories, N)
    n_near = int(round(tc.n_recon_queries * tc.near_surface_fraction))
    n_uniform = tc.n_recon_queries - n_near
    traj, queries, labels, gt_flow = [], [], [], []
    for seq in sequences:
        if seq.shape is None:
            raise ValueError(f"sequence {seq.name!r} lacks its generating shape; occupancy labels need it")
        idx = np.sort(rng.choice(N, K, replace=False))
        traj.append(idx)
        q_seq, l_seq = [], []
        for t in seq.times:
            occ = sample_occupancy_queries(seq.shape, float(t), n_uniform, n_near, tc.near_surface_band, rng)
            q_seq.append(occ.points)
            l_seq.append(occ.labels)
        queries.append(q_seq)
        labels.append(l_seq)
        if config.loss.flow_variant == "l2_supervised":
            gt_flow.append([correspondence_displacement(seq.shape, seq.points[t, idx], seq.times[t], seq.times[t + 1])
                            for t in range(seq.n_frames - 1)])
    as_t = lambda x: torch.as_tensor(np.asarray(x), dtype=dtype)  # noqa: E731
    return Batch(as_t([s.points for s in sequences]), as_t([s.times for s in sequences]),
                 torch.as_tensor(np.stack(traj)), as_t(queries), as_t(labels),
                 as_t(gt_flow) if gt_flow else None, [s.name for s in sequences])


def _gather_trajectories(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (B, T, N, 3), idx (B, K) -> (B, T, K, 3)."""
    B, T, _, D = x.shape
    return torch.gather(x, 2, idx[:, None, :, None].expand(B, T, idx.shape[1], D))


def compute_losses(model: JointModel, batch: Batch, config: Config) -> dict[str, torch.Tensor]:
    """Total loss over the configured directions; the spatial encoding is
    shared, the temporal encoder runs once per direction."""
    lw = config.loss
    spatial = model.encode_spatial(batch.points)
    directions = ["forward"] if lw.directions == "forward_only" else ["forward", "backward"]
    flow_sum = recon_sum = total = 0.0
    for direction in directions:
        pts, times, sp = batch.points, batch.times, spatial
        queries, labels, gt = batch.queries, batch.labels, batch.gt_flow
        if direction == "backward":
            pts, times = reverse_time(pts, times)
            sp = reverse_spatial(spatial)
            queries, labels = queries.flip(1), labels.flip(1)
            if gt is not None:
                gt = -_backward_gt(batch)
        out = model.run_direction(pts, times, sp)
        sel = _gather_trajectories(pts, batch.trajectories)
        disp = _gather_trajectories(out.flow, batch.trajectories)[:, :-1]
        per_step = flow_loss(sel[:, :-1] + disp, sel[:, 1:], lw, gt_displacement=gt, displacement=disp)
        fl = reduce_over_time(per_step, lw.time_reduction).mean()
        logits = model.decode_occupancy(queries, out.e, out.pooled_features)
        rl = recon_loss_bce_logits(logits, labels)
        flow_sum = flow_sum + fl
        recon_sum = recon_sum + rl
        total = total + fl + lw.lam * rl
    return {"flow": flow_sum, "recon": recon_sum, "total": total}


def _backward_gt(batch: Batch) -> torch.Tensor:
    # time-reversed step k goes from frame T-1-k to T-2-k; its displacement
    # is minus the forward step T-2-k
    return batch.gt_flow.flip(1)


class Trainer:
    def __init__(self, config: Config, model: JointModel | None = None, out_dir: str | Path | None = None):
        self.config = config
        torch.manual_seed(config.train.seed)
        self.model = model or JointModel(config.model_config())
        self.store = ParamStore(self.model)
        self.state = TrainState(rng=np.random.default_rng(config.train.seed))
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.loss_evaluations = 0

    # --- stepping ----------------------------------------------------------

    @property
    def lr(self) -> float:
        tc = self.config.train
        return learning_rate(self.state.iteration, tc.lr, tc.lr_decay_every, tc.lr_decay_factor)

    def sample_batch(self, dataset: Sequence[PointCloudSequence]) -> list[PointCloudSequence]:
        if not dataset:
            raise ValueError("empty training set")
        B = min(self.config.train.batch_size, len(dataset))
        idx = self.state.rng.choice(len(dataset), B, replace=False)
        return [dataset[i] for i in sorted(idx)]

    def train_step(self, sequences: Sequence[PointCloudSequence]) -> dict[str, float]:
        if not sequences:
            raise ValueError("empty batch")
        for s in sequences:
            if s.n_frames < 2:
                raise ValueError(f"sequence {s.name!r} has fewer than 2 frames")
        self.model.train()
        batch = make_batch(sequences, self.config, self.state.rng)
        self.store.zero_grad()
        losses = compute_losses(self.model, batch, self.config)
        self.loss_evaluations += 1 if self.config.loss.directions == "forward_only" else 2
        values = {k: float(v.detach()) for k, v in losses.items()}
        if not all(math.isfinite(v) for v in values.values()):
            dump = self._dump_nonfinite(batch, values)
            raise NonFiniteLossError(f"non-finite loss {values} on sequences {batch.names}", batch.names, dump)
        losses["total"].backward()
        lr = self.lr
        adam_step(self.store, lr=lr, max_grad_norm=self.config.train.max_grad_norm)
        self.state.iteration += 1
        record = {"iter": self.state.iteration, **values, "lr": lr}
        self.state.loss_trace.append(record)
        return record

    def _dump_nonfinite(self, batch: Batch, values) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"nonfinite_{self.state.iteration:06d}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"iteration": self.state.iteration, "sequences": batch.names,
                                    "losses": {k: repr(v) for k, v in values.items()},
                                    "points_finite": bool(torch.isfinite(batch.points).all())}, indent=2))
        return path

    # --- validation --------------------------------------------------------

    def validate(self, val_set: Sequence[PointCloudSequence], predictor=None) -> dict[str, float]:
        return validate(predictor or ModelPredictor(self.model), val_set, self.config)

    # --- checkpoints -------------------------------------------------------

    def checkpoint_meta(self) -> dict[str, Any]:
        return {"config": self.config.to_dict(), "config_hash": config_hash(self.config.to_dict()),
                "state": self.state.to_meta()}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.store, self.checkpoint_meta())

    def load(self, path: str | Path) -> None:
        meta = load_checkpoint(path, self.store)
        self.state = TrainState.from_meta(meta["state"])

    @classmethod
    def from_checkpoint(cls, path: str | Path, out_dir=None) -> "Trainer":
        from .container import load as load_container
        _, meta = load_container(path)
        trainer = cls(Config.from_dict(meta["config"]), out_dir=out_dir)
        trainer.load(path)
        return trainer

    # --- loop --------------------------------------------------------------

    def fit(self, train_set: Sequence[PointCloudSequence], val_set: Sequence[PointCloudSequence] | None = None,
            max_iters: int | None = None, callback=None) -> TrainState:
        tc = self.config.train
        max_iters = tc.max_iters if max_iters is None else max_iters
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self.out_dir / "train_log.jsonl", "a")
        try:
            while self.state.iteration < max_iters:
                record = self.train_step(self.sample_batch(train_set))
                it = self.state.iteration
                if log_file is not None and it % tc.log_every == 0:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if callback is not None:
                    callback(self, record)
                if val_set and it % tc.val_every == 0:
                    metrics = self.validate(val_set)
                    metrics["iter"] = it
                    self.state.history.append(metrics)
                    log.info("validation at %d: %s", it, metrics)
                    if metrics["iou"] > self.state.best_iou:
                        self.state.best_iou = metrics["iou"]
                        self.state.best_iteration = it
                        self.state.bad_validations = 0
                        if self.out_dir is not None:
                            self.save(self.out_dir / "best.ckpt")
                    else:
                        self.state.bad_validations += 1
                        if self.state.bad_validations >= tc.patience:
                            log.info("early stop at %d", it)
                            break
                if self.out_dir is not None and tc.checkpoint_every and it % tc.checkpoint_every == 0:
                    self.save(self.out_dir / "last.ckpt")
        finally:
            if log_file is not None:
                log_file.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "last.ckpt")
            if not (self.out_dir / "best.ckpt").exists():
                self.save(self.out_dir / "best.ckpt")
        return self.state


def validate(predictor, val_set: Sequence[PointCloudSequence], config: Config) -> dict[str, float]:
    """Mean IoU, Chamfer and correspondence over the validation sequences."""
    from .evaluation import evaluate_predictor, mean_metrics

    if not val_set:
        raise ValueError("empty validation set")
    ex, ev = config.extraction, config.eval
    reports = [evaluate_predictor(predictor, seq, ex.tau, ex.start_res, ex.upsample_steps, ev.n_samples,
                                  ev.iou_samples, ev.seed)[0] for seq in val_set]
    return mean_metrics(reports)


def train(config: Config, train_set, val_set=None, out_dir=None, resume: str | Path | None = None) -> Trainer:
    trainer = Trainer(config, out_dir=out_dir)
    if resume is not None:
        trainer.load(resume)
    start = time.perf_counter()
    trainer.fit(train_set, val_set)
    log.info("trained %d iterations in %.1fs", trainer.state.iteration, time.perf_counter() - start)
    return trainer
