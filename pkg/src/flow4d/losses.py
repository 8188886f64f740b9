"""Flow losses, reconstruction loss and their combination.

All functions accept torch tensors (autograd flows through) or array-likes,
which are converted to float64 tensors. Point-set losses operate on the last
two axes ``(..., N, 3)`` and return one value per leading index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

FLOW_VARIANTS = ("chamfer", "l2_supervised", "hausdorff", "sliced_wasserstein")
DIRECTIONS = ("forward_only", "forward_backward")
BCE_CLAMP = 1e-7


@dataclass
class LossWeights:
    lam: float = 0.1
    flow_variant: str = "chamfer"
    directions: str = "forward_backward"
    sum_directions: bool = False     # conventional Chamfer sum instead of max
    time_reduction: str = "mean"     # "mean" over T-1 steps or raw "sum"
    swd_projections: int = 32

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.flow_variant not in FLOW_VARIANTS:
            raise ValueError(f"unknown flow variant {self.flow_variant!r}")
        if self.directions not in DIRECTIONS:
            raise ValueError(f"unknown direction mode {self.directions!r}")
        if self.time_reduction not in ("mean", "sum"):
            raise ValueError("time_reduction must be 'mean' or 'sum'")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.array(x, dtype=np.float64, order="C"))


def _pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _tensor(a), _tensor(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("point sets must be non-empty")
    return a, b


def pairwise_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distances (..., N, M) with a zero-safe square root."""
    d2 = ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)
    pos = d2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))


def directed_terms(translated, target) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean nearest-neighbour distance translated->target and target->translated."""
    a, b = _pair(translated, target)
    d = pairwise_distances(a, b)
    return d.min(dim=-1).values.mean(-1), d.min(dim=-2).values.mean(-1)


def flow_loss_chamfer(translated, target, sum_directions: bool = False) -> torch.Tensor:
    fwd, bwd = directed_terms(translated, target)
    return fwd + bwd if sum_directions else torch.maximum(fwd, bwd)


def flow_loss_hausdorff(translated, target) -> torch.Tensor:
    a, b = _pair(translated, target)
    d = pairwise_distances(a, b)
    return torch.maximum(d.min(dim=-1).values.max(-1).values, d.min(dim=-2).values.max(-1).values)


def projection_directions(n_projections: int, seed: int = 0) -> torch.Tensor:
    if n_projections < 1:
        raise ValueError("need at least one projection")
    g = torch.Generator().manual_seed(int(seed))
    d = torch.randn(n_projections, 3, generator=g, dtype=torch.float64)
    return d / d.norm(dim=1, keepdim=True)


def _quantile_grid(n: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices into the sorted samples of each set and the interval widths on
    which both empirical quantile functions are constant."""
    breaks = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    return np.minimum((mid * n).astype(int), n - 1), np.minimum((mid * m).astype(int), m - 1), np.diff(breaks)


def flow_loss_swd(translated, target, n_projections: int = 32, seed: int = 0) -> torch.Tensor:
    """Mean over random unit directions of the exact 1-D W1 distance between
    the projected empirical measures."""
    a, b = _pair(translated, target)
    dirs = projection_directions(n_projections, seed).to(a.dtype)
    pa = torch.sort(a @ dirs.T, dim=-2).values
    pb = torch.sort(b @ dirs.T, dim=-2).values
    n, m = a.shape[-2], b.shape[-2]
    if n == m:
        return (pa - pb).abs().mean(-2).mean(-1)
    ia, ib, w = _quantile_grid(n, m)
    diff = (pa[..., torch.as_tensor(ia), :] - pb[..., torch.as_tensor(ib), :]).abs()
    return (diff * torch.as_tensor(w, dtype=a.dtype)[:, None]).sum(-2).mean(-1)


def flow_loss_l2_supervised(pred, gt) -> torch.Tensor:
    """Mean norm of the displacement error; ``gt`` may be a FlowSamples."""
    if hasattr(gt, "vectors"):
        gt = gt.vectors
    p, g = _tensor(pred), _tensor(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    diff = p - g.to(p.dtype)
    return diff.norm(dim=-1).mean(-1)


def flow_loss(translated, target, weights: LossWeights, gt_displacement=None, displacement=None):
    v = weights.flow_variant
    if v == "chamfer":
        return flow_loss_chamfer(translated, target, weights.sum_directions)
    if v == "hausdorff":
        return flow_loss_hausdorff(translated, target)
    if v == "sliced_wasserstein":
        return flow_loss_swd(translated, target, weights.swd_projections)
    if gt_displacement is None or displacement is None:
        raise ValueError("l2_supervised needs predicted and ground-truth displacements")
    return flow_loss_l2_supervised(displacement, gt_displacement)


def reduce_over_time(per_step: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """per_step (..., T-1) -> (...)."""
    return per_step.mean(-1) if mode == "mean" else per_step.sum(-1)


def recon_loss_bce(probs, labels) -> torch.Tensor:
    """Mean binary cross entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    if hasattr(labels, "labels"):
        labels = labels.labels
    p, y = _tensor(probs), _tensor(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    y = y.to(p.dtype)
    p = p.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def recon_loss_bce_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """BCE of ``sigmoid(logits)`` with the same clamp, computed stably."""
    lo, hi = math.log(BCE_CLAMP / (1 - BCE_CLAMP)), math.log((1 - BCE_CLAMP) / BCE_CLAMP)
    z = logits.clamp(lo, hi)
    y = labels.to(z.dtype)
    return (torch.nn.functional.softplus(z) - y * z).mean()


def total_loss(flow, recon, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    for x in (flow, recon):
        if not bool(np.all(np.isfinite(np.asarray(x.detach() if isinstance(x, torch.Tensor) else x)))):
            raise FloatingPointError("non-finite loss term")
    return flow + weights.lam * recon
