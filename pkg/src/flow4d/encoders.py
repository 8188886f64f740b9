"""Spatial (per frame) and temporal (whole sequence) point encoders.

Both are the pooled residual PointNet: points are lifted to ``width``
features, then each of ``n_blocks`` residual stages sees every point feature
concatenated with the max-pooled feature of its set.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import FC, ResidualBlock


@dataclass
class LatentCodes:
    spatial_tokens: torch.Tensor   # (B, T, N, C)
    spatial_code: torch.Tensor     # (B, T, C)
    temporal_tokens: torch.Tensor  # (B, T, C)
    temporal_code: torch.Tensor    # (B, C)


class PointNetResEncoder(nn.Module):
    def __init__(self, dim: int = 3, width: int = 128, n_blocks: int = 5):
        super().__init__()
        self.dim = dim
        self.width = width
        self.fc_pos = FC(dim, width, name="enc.fc_pos")
        self.blocks = nn.ModuleList([ResidualBlock(2 * width, width) for _ in range(n_blocks)])

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(G, N, dim) -> per-point tokens (G, N, C) and pooled code (G, C)."""
        x = self.fc_pos(points)
        for block in self.blocks:
            pooled = x.max(dim=-2, keepdim=True).values.expand_as(x)
            x = block(torch.cat([x, pooled], dim=-1))
        return x, x.max(dim=-2).values


class SpatialEncoder(PointNetResEncoder):
    def __init__(self, width: int = 128, n_blocks: int = 5):
        super().__init__(3, width, n_blocks)

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode every frame independently: (..., N, 3) -> (..., N, C), (..., C)."""
        if points.shape[-2] < 2:
            raise ValueError("spatial encoding needs at least 2 points per frame")
        lead = points.shape[:-2]
        tokens, code = super().forward(points.reshape(-1, *points.shape[-2:]))
        return tokens.reshape(*lead, *tokens.shape[-2:]), code.reshape(*lead, -1)


class TemporalEncoder(PointNetResEncoder):
    """Encodes a whole sequence from (x, y, z, t) points.

    ``calls`` counts encoded sequences, so callers can check the temporal
    code is computed once per sequence and direction.
    """

    def __init__(self, width: int = 128, n_blocks: int = 5):
        super().__init__(4, width, n_blocks)
        self.calls = 0

    def forward(self, points: torch.Tensor, times: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, N, 3) points with (B, T) times -> frame tokens (B, T, C), code (B, C)."""
        B, T, N, _ = points.shape
        if T < 2:
            raise ValueError("temporal encoding needs at least 2 frames")
        if torch.any(times[:, 1:] <= times[:, :-1]):
            raise ValueError("frame times must be strictly increasing")
        t = times[:, :, None, None].expand(B, T, N, 1).to(points.dtype)
        x = torch.cat([points, t], dim=-1).reshape(B, T * N, 4)
        tokens, code = super().forward(x)
        self.calls += B
        frame_tokens = tokens.reshape(B, T, N, -1).max(dim=2).values
        return frame_tokens, code


def encode_spatial(encoder: SpatialEncoder, frame_points: torch.Tensor):
    return encoder(frame_points)


def encode_temporal(encoder: TemporalEncoder, points: torch.Tensor, times: torch.Tensor):
    return encoder(points, times)
