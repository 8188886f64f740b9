"""Spatio-temporal fusion of the spatial and temporal codes.

Three modes:

``concat``
    ``e_t = W [S_t, h] + b``.
``single_cross_attn``
    spatial tokens attend over the temporal frame tokens (SCA); ``e_t`` is
    the max-pool of the resulting tokens.
``dual_cross_attn``
    SCA as above, then the query ``[S_t, h]`` attends over the SCA tokens
    (TCA); ``e_t = maxpool(SCA) + TCA``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .layers import FC

FUSION_MODES = ("concat", "single_cross_attn", "dual_cross_attn")


class CrossAttention(nn.Module):
    """``softmax(Q K^T / sqrt(C)) V`` with layer-normalised inputs and
    bias-free projections. ``heads > 1`` splits the channels."""

    def __init__(self, dim_q: int, dim_kv: int, channels: int, heads: int = 1, prenorm: bool = True):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.channels = channels
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim_q) if prenorm else nn.Identity()
        self.norm_kv = nn.LayerNorm(dim_kv) if prenorm else nn.Identity()
        self.to_q = FC(dim_q, channels, bias=False, name="attn.q")
        self.to_k = FC(dim_kv, channels, bias=False, name="attn.k")
        self.to_v = FC(dim_kv, channels, bias=False, name="attn.v")

    def forward(self, queries, keys, values):
        if keys.shape[-2] == 0:
            raise ValueError("cross attention needs at least one key row")
        if keys.shape[-2] != values.shape[-2]:
            raise ValueError("keys and values must have the same number of rows")
        q = self.to_q(self.norm_q(queries))
        k = self.to_k(self.norm_kv(keys))
        v = self.to_v(self.norm_kv(values))
        if self.heads == 1:
            w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.channels), dim=-1)
            return w @ v, w
        d = self.channels // self.heads
        split = lambda x: x.reshape(*x.shape[:-1], self.heads, d).transpose(-2, -3)  # noqa: E731
        qh, kh, vh = split(q), split(k), split(v)
        w = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (w @ vh).transpose(-2, -3)
        return out.reshape(*out.shape[:-2], self.channels), w


def cross_attention(module: CrossAttention, queries, keys, values):
    return module(queries, keys, values)


@dataclass
class FusedCode:
    e: torch.Tensor
    diagnostics: dict[str, torch.Tensor] = field(default_factory=dict)


class Fusion(nn.Module):
    def __init__(self, channels: int, mode: str = "dual_cross_attn", heads: int = 1):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
        self.mode = mode
        self.channels = channels
        if mode == "concat":
            self.proj = FC(2 * channels, channels, name="fusion.concat")
        else:
            self.sca = CrossAttention(channels, channels, channels, heads)
        if mode == "dual_cross_attn":
            self.tca = CrossAttention(2 * channels, channels, channels, heads)

    def _check(self, *tensors):
        for t in tensors:
            if t.shape[-1] != self.channels:
                raise ValueError(f"fusion expects {self.channels} channels, got {t.shape[-1]}")

    def sca_tokens(self, spatial_tokens, temporal_tokens):
        """Spatial tokens (G, N, C) attend over temporal tokens (G, T, C);
        the queries are added back onto the attention output."""
        self._check(spatial_tokens, temporal_tokens)
        if spatial_tokens.shape[-2] == 0 or temporal_tokens.shape[-2] == 0:
            raise ValueError("token sets must be non-empty")
        out, w = self.sca(spatial_tokens, temporal_tokens, temporal_tokens)
        return spatial_tokens + out, w

    def tca_code(self, spatial_code, temporal_code, sca_tokens):
        """Query [S_t, h] (G, 2C) attends over SCA tokens (G, N, C) -> (G, C)."""
        self._check(spatial_code, temporal_code, sca_tokens)
        query = torch.cat([spatial_code, temporal_code], dim=-1).unsqueeze(-2)
        out, w = self.tca(query, sca_tokens, sca_tokens)
        return out.squeeze(-2), w

    def forward(self, spatial_code, temporal_code, spatial_tokens=None, temporal_tokens=None) -> FusedCode:
        """Shapes: codes (G, C); spatial tokens (G, N, C); temporal tokens (G, T, C)."""
        if self.mode == "concat":
            self._check(spatial_code, temporal_code)
            return FusedCode(self.proj(torch.cat([spatial_code, temporal_code], dim=-1)))
        tokens, w_sca = self.sca_tokens(spatial_tokens, temporal_tokens)
        pooled = tokens.max(dim=-2).values
        if self.mode == "single_cross_attn":
            return FusedCode(pooled, {"sca": w_sca})
        tca, w_tca = self.tca_code(spatial_code, temporal_code, tokens)
        return FusedCode(pooled + tca, {"sca": w_sca, "tca": w_tca})


def fuse_sca(fusion: Fusion, spatial_tokens, temporal_tokens):
    return fusion.sca_tokens(spatial_tokens, temporal_tokens)[0]


def fuse_tca(fusion: Fusion, spatial_code, temporal_code, sca_tokens):
    return fusion.tca_code(spatial_code, temporal_code, sca_tokens)[0]


def fuse(fusion: Fusion, spatial_code, temporal_code, spatial_tokens, temporal_tokens) -> FusedCode:
    return fusion(spatial_code, temporal_code, spatial_tokens, temporal_tokens)
