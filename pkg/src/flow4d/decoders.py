"""Flow (temporal) decoder and conditional occupancy decoder."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .layers import CBN, FC, CBNResidualBlock, ResidualBlock


class TemporalDecoder(nn.Module):
    """Per-point displacement ``V_t`` and flow features ``f_t``.

    Each point of frame t is concatenated with the reference code ``e_ref``
    and the frame code ``e_t``, lifted to ``hidden`` and passed through
    residual blocks; the trunk output is ``f_t``. The displacement head is
    zero-initialised.
    """

    def __init__(self, code_dim: int = 128, hidden: int = 128, n_blocks: int = 5):
        super().__init__()
        self.code_dim = code_dim
        self.hidden = hidden
        self.fc_in = FC(3 + 2 * code_dim, hidden, name="tdec.fc_in")
        self.blocks = nn.ModuleList([ResidualBlock(hidden) for _ in range(n_blocks)])
        self.fc_out = FC(hidden, 3, name="tdec.fc_out").zero_()

    def forward(self, points: torch.Tensor, e_ref: torch.Tensor, e_t: torch.Tensor):
        """points (G, N, 3), codes (G, C) -> V (G, N, 3), f (G, N, hidden)."""
        if e_ref.shape[-1] != self.code_dim or e_t.shape[-1] != self.code_dim:
            raise ValueError(f"temporal decoder expects codes of width {self.code_dim}")
        if points.shape[-2] == 0:
            raise ValueError("temporal decoder needs at least one point")
        n = points.shape[-2]
        codes = torch.cat([e_ref, e_t], dim=-1).unsqueeze(-2).expand(*points.shape[:-1], 2 * self.code_dim)
        f = self.fc_in(torch.cat([points, codes], dim=-1))
        for block in self.blocks:
            f = block(f)
        assert f.shape[-2] == n
        return self.fc_out(F.relu(f)), f


class OccupancyDecoder(nn.Module):
    """Occupancy logits for query points, conditioned on ``e_t`` through CBN.

    The pooled flow features of the frame are concatenated onto every query
    feature before the final CBN; the output layer is zero-initialised.
    """

    def __init__(self, code_dim: int = 128, hidden: int = 128, n_blocks: int = 5, momentum: float = 0.1):
        super().__init__()
        self.code_dim = code_dim
        self.hidden = hidden
        self.fc_p = FC(3, hidden, name="odec.fc_p")
        self.blocks = nn.ModuleList([CBNResidualBlock(hidden, code_dim, momentum) for _ in range(n_blocks)])
        self.bn_out = CBN(2 * hidden, code_dim, momentum)
        self.fc_out = FC(2 * hidden, 1, name="odec.fc_out").zero_()

    def forward(self, queries: torch.Tensor, e_t: torch.Tensor, f_pooled: torch.Tensor,
                mode: str | None = None) -> torch.Tensor:
        """queries (G, M, 3), e_t (G, C), f_pooled (G, hidden) -> logits (G, M)."""
        G, M, _ = queries.shape
        if M == 0:
            raise ValueError("occupancy decoder needs at least one query")
        if e_t.shape[-1] != self.code_dim:
            raise ValueError(f"occupancy decoder expects codes of width {self.code_dim}")
        groups = torch.arange(G, device=queries.device).repeat_interleave(M)
        x = self.fc_p(queries.reshape(G * M, 3))
        for block in self.blocks:
            x = block(x, e_t, groups, mode)
        x = torch.cat([x, f_pooled[groups]], dim=-1)
        x = self.fc_out(F.relu(self.bn_out(x, e_t, groups, mode)))
        return x.reshape(G, M)


def temporal_decode(decoder: TemporalDecoder, e_ref, e_t, points):
    return decoder(points, e_ref, e_t)


def occupancy_decode(decoder: OccupancyDecoder, queries, e_t, f_pooled, mode="eval") -> torch.Tensor:
    return torch.sigmoid(decoder(queries, e_t, f_pooled, mode))
