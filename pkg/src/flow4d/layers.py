"""Differentiable building blocks shared by the encoders, fusion and decoders.

Gradients come from torch autograd. Conventions fixed here:

* fully connected weights and biases start uniform in +-1/sqrt(fan_in);
* conditional batch norm updates running statistics as
  ``new = (1 - momentum) * old + momentum * batch``.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import container


class FC(nn.Linear):
    """Affine layer ``rows @ W.T + b`` that names itself in shape errors."""

    def __init__(self, size_in: int, size_out: int, bias: bool = True, name: str = "fc"):
        super().__init__(size_in, size_out, bias=bias)
        self.name = name
        bound = 1.0 / math.sqrt(size_in)
        with torch.no_grad():
            self.weight.uniform_(-bound, bound)
            if self.bias is not None:
                self.bias.uniform_(-bound, bound)

    def zero_(self) -> "FC":
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(
                f"layer {self.name}: expected input width {self.in_features}, got {x.shape[-1]}"
            )
        return super().forward(x)


def fc_forward(layer: FC, rows: torch.Tensor) -> torch.Tensor:
    return layer(rows)


class ResidualBlock(nn.Module):
    """Pre-activation residual block ``x + fc_1(relu(fc_0(relu(x))))``.

    When ``size_in != size_out`` the skip path is a bias-free linear map.
    """

    def __init__(self, size_in: int, size_out: int | None = None, hidden: int | None = None):
        super().__init__()
        size_out = size_in if size_out is None else size_out
        hidden = min(size_in, size_out) if hidden is None else hidden
        self.size_in, self.size_out = size_in, size_out
        self.fc_0 = FC(size_in, hidden, name="res.fc_0")
        self.fc_1 = FC(hidden, size_out, name="res.fc_1")
        self.shortcut = FC(size_in, size_out, bias=False, name="res.shortcut") if size_in != size_out else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.size_in:
            raise ValueError(f"residual block expects width {self.size_in}, got {x.shape[-1]}")
        dx = self.fc_1(F.relu(self.fc_0(F.relu(x))))
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + dx


def residual_block(block: ResidualBlock, features: torch.Tensor) -> torch.Tensor:
    return block(features)


class CBN(nn.Module):
    """Batch normalisation whose scale and shift are affine functions of a
    conditioning code.

    ``code`` is either one row per feature row, a single vector, or one row
    per group together with ``groups`` mapping feature rows to code rows.
    """

    def __init__(self, width: int, code_dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.gamma_proj = FC(code_dim, width, name="cbn.gamma")
        self.beta_proj = FC(code_dim, width, name="cbn.beta")
        with torch.no_grad():
            self.gamma_proj.weight.zero_()
            self.gamma_proj.bias.fill_(1.0)
            self.beta_proj.zero_()
        self.register_buffer("running_mean", torch.zeros(width))
        self.register_buffer("running_var", torch.ones(width))

    def forward(self, x: torch.Tensor, code: torch.Tensor, groups: torch.Tensor | None = None,
                mode: str | None = None) -> torch.Tensor:
        mode = mode or ("train" if self.training else "eval")
        if x.shape[-1] != self.width:
            raise ValueError(f"CBN expects width {self.width}, got {x.shape[-1]}")
        if mode == "train":
            if x.shape[0] < 2:
                raise ValueError("batch too small for CBN")
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            with torch.no_grad():
                n = x.shape[0]
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var.detach() * n / (n - 1))
        elif mode == "eval":
            mean, var = self.running_mean, self.running_var
        else:
            raise ValueError(f"unknown CBN mode {mode!r}")
        gamma = self.gamma_proj(code)
        beta = self.beta_proj(code)
        if groups is not None:
            gamma, beta = gamma[groups], beta[groups]
        return gamma * (x - mean) / torch.sqrt(var + self.eps) + beta


def cbn_forward(layer: CBN, features, code, mode: str = "train", groups=None) -> torch.Tensor:
    return layer(features, code, groups=groups, mode=mode)


class CBNResidualBlock(nn.Module):
    """``x + fc_1(relu(cbn_1(fc_0(relu(cbn_0(x))))))``."""

    def __init__(self, width: int, code_dim: int, momentum: float = 0.1):
        super().__init__()
        self.width = width
        self.bn_0 = CBN(width, code_dim, momentum)
        self.bn_1 = CBN(width, code_dim, momentum)
        self.fc_0 = FC(width, width, name="cbnres.fc_0")
        self.fc_1 = FC(width, width, name="cbnres.fc_1")

    def forward(self, x, code, groups=None, mode=None):
        if x.shape[-1] != self.width:
            raise ValueError(f"residual block expects width {self.width}, got {x.shape[-1]}")
        h = self.fc_0(F.relu(self.bn_0(x, code, groups, mode)))
        dx = self.fc_1(F.relu(self.bn_1(h, code, groups, mode)))
        return x + dx


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamStore:
    """Named parameters of a module plus Adam moment accumulators."""

    def __init__(self, module: nn.Module, frozen: tuple[str, ...] = ()):
        self.module = module
        self.params: dict[str, nn.Parameter] = dict(module.named_parameters())
        self.frozen = set(frozen)
        unknown = self.frozen - set(self.params)
        if unknown:
            raise KeyError(f"cannot freeze unknown parameters {sorted(unknown)}")
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}


def global_grad_norm(grads: Mapping[str, torch.Tensor]) -> float:
    return float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())))


def adam_step(store: ParamStore, grads: Mapping[str, torch.Tensor] | None = None, lr: float = 1e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              max_grad_norm: float | None = None) -> None:
    grads = store.grads() if grads is None else grads
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != store.params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    scale = 1.0
    if max_grad_norm is not None:
        norm = global_grad_norm(grads)
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
    store.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** store.step
    c2 = 1 - b2 ** store.step
    with torch.no_grad():
        for name in sorted(grads):
            if name in store.frozen:
                continue
            g = grads[name] * scale
            m, v = store.m[name], store.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            store.params[name].sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


def learning_rate(iteration: int, base: float, decay_every: int, decay_factor: float) -> float:
    if decay_every <= 0:
        return base
    return base * decay_factor ** (iteration // decay_every)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def save_checkpoint(path: str | Path, store: ParamStore, meta: Mapping[str, Any]) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, p in store.params.items():
        arrays[f"param/{k}"] = _np(p)
    for k, b in store.module.named_buffers():
        arrays[f"buffer/{k}"] = _np(b)
    for k in store.params:
        arrays[f"adam_m/{k}"] = _np(store.m[k])
        arrays[f"adam_v/{k}"] = _np(store.v[k])
    container.save(path, arrays, {**meta, "adam_step": store.step, "format": "flow4d-checkpoint-1"})


def load_checkpoint(path: str | Path, store: ParamStore | None = None,
                    module: nn.Module | None = None) -> dict[str, Any]:
    """Restore parameters, buffers and (when ``store`` is given) Adam state."""
    arrays, meta = container.load(path)
    module = store.module if store is not None else module
    if module is None:
        raise ValueError("need a ParamStore or a module to load into")
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    with torch.no_grad():
        for k, p in params.items():
            src = arrays.get(f"param/{k}")
            if src is None:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for parameter {k}")
            p.copy_(torch.from_numpy(src).to(p.dtype))
        for k, b in buffers.items():
            if f"buffer/{k}" in arrays:
                b.copy_(torch.from_numpy(arrays[f"buffer/{k}"]).to(b.dtype))
        if store is not None:
            for k in store.params:
                store.m[k].copy_(torch.from_numpy(arrays[f"adam_m/{k}"]))
                store.v[k].copy_(torch.from_numpy(arrays[f"adam_v/{k}"]))
            store.step = int(meta["adam_step"])
    return meta
