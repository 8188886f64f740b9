"""The joint flow and occupancy model, plus predictor wrappers used at
inference and evaluation time."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .decoders import OccupancyDecoder, TemporalDecoder
from .encoders import LatentCodes, SpatialEncoder, TemporalEncoder
from .fusion import Fusion
from .synthetic import PointCloudSequence, correspondence_displacement


@dataclass
class ModelConfig:
    width: int = 128           # encoder / code channels C
    hidden: int = 128          # decoder width
    n_blocks: int = 5
    heads: int = 1
    fusion_mode: str = "dual_cross_attn"
    cbn_momentum: float = 0.1


@dataclass
class DirectionOutputs:
    codes: LatentCodes
    e: torch.Tensor          # (B, T, C)
    flow: torch.Tensor       # (B, T, N, 3)
    features: torch.Tensor   # (B, T, N, H)

    @property
    def pooled_features(self) -> torch.Tensor:
        return self.features.max(dim=2).values


class JointModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, **overrides):
        super().__init__()
        cfg = config or ModelConfig()
        if overrides:
            cfg = ModelConfig(**{**cfg.__dict__, **overrides})
        self.config = cfg
        C, H = cfg.width, cfg.hidden
        self.spatial_encoder = SpatialEncoder(C, cfg.n_blocks)
        self.temporal_encoder = TemporalEncoder(C, cfg.n_blocks)
        self.fusion = Fusion(C, cfg.fusion_mode, cfg.heads)
        self.temporal_decoder = TemporalDecoder(C, H, cfg.n_blocks)
        self.occupancy_decoder = OccupancyDecoder(C, H, cfg.n_blocks, cfg.cbn_momentum)

    # --- encoding ----------------------------------------------------------

    def encode_spatial(self, points: torch.Tensor):
        """(B, T, N, 3) -> tokens (B, T, N, C), codes (B, T, C)."""
        return self.spatial_encoder(points)

    def encode(self, points, times, spatial=None) -> LatentCodes:
        tokens, S = spatial if spatial is not None else self.encode_spatial(points)
        frame_tokens, h = self.temporal_encoder(points, times)
        return LatentCodes(tokens, S, frame_tokens, h)

    def fuse(self, codes: LatentCodes) -> torch.Tensor:
        B, T, N, C = codes.spatial_tokens.shape
        h = codes.temporal_code[:, None, :].expand(B, T, C)
        tt = codes.temporal_tokens[:, None].expand(B, T, T, C)
        fused = self.fusion(codes.spatial_code.reshape(B * T, C), h.reshape(B * T, C),
                            codes.spatial_tokens.reshape(B * T, N, C), tt.reshape(B * T, T, C))
        return fused.e.reshape(B, T, C)

    # --- decoding ----------------------------------------------------------

    def decode_flow(self, points: torch.Tensor, e: torch.Tensor):
        """Displacements and flow features for every frame, with the first
        frame's code as the reference."""
        B, T, N, _ = points.shape
        e_ref = e[:, :1].expand_as(e)
        V, f = self.temporal_decoder(points.reshape(B * T, N, 3), e_ref.reshape(B * T, -1),
                                     e.reshape(B * T, -1))
        return V.reshape(B, T, N, 3), f.reshape(B, T, N, -1)

    def decode_occupancy(self, queries, e, f_pooled, mode=None) -> torch.Tensor:
        """queries (B, T, M, 3) -> logits (B, T, M)."""
        B, T, M, _ = queries.shape
        logits = self.occupancy_decoder(queries.reshape(B * T, M, 3), e.reshape(B * T, -1),
                                        f_pooled.reshape(B * T, -1), mode)
        return logits.reshape(B, T, M)

    def run_direction(self, points, times, spatial=None) -> DirectionOutputs:
        codes = self.encode(points, times, spatial)
        e = self.fuse(codes)
        V, f = self.decode_flow(points, e)
        return DirectionOutputs(codes, e, V, f)


def reverse_time(points: torch.Tensor, times: torch.Tensor):
    """The backward sequence P_T..P_1 with mirrored times ``1 - t``."""
    return points.flip(1), 1.0 - times.flip(1)


def reverse_spatial(spatial):
    tokens, S = spatial
    return tokens.flip(1), S.flip(1)


# ---------------------------------------------------------------------------
# predictors


class SequencePrediction:
    """Per-frame occupancy evaluators and per-point flows for one sequence.

    ``flows[t]`` displaces ``points[t]`` towards frame t+1; the last row is
    whatever the decoder emits there and is not used by the metrics.
    """

    def __init__(self, sequence: PointCloudSequence, flows: np.ndarray,
                 occupancy_fn: Callable[[int, np.ndarray], np.ndarray]):
        self.sequence = sequence
        self.flows = np.asarray(flows, dtype=np.float64)
        self._occupancy = occupancy_fn

    @property
    def n_frames(self) -> int:
        return self.sequence.n_frames

    def occupancy(self, frame: int, points: np.ndarray) -> np.ndarray:
        out = np.asarray(self._occupancy(frame, np.asarray(points, dtype=np.float64)), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite occupancy at frame {frame}")
        return out

    def field(self, frame: int) -> Callable[[np.ndarray], np.ndarray]:
        return lambda pts: self.occupancy(frame, pts)


class ModelPredictor:
    def __init__(self, model: JointModel, chunk: int = 65536):
        self.model = model
        self.chunk = chunk

    @torch.no_grad()
    def __call__(self, sequence: PointCloudSequence) -> SequencePrediction:
        model = self.model
        was_training = model.training
        model.eval()
        dtype = next(model.parameters()).dtype
        pts = torch.as_tensor(sequence.points, dtype=dtype)[None]
        times = torch.as_tensor(sequence.times, dtype=dtype)[None]
        out = model.run_direction(pts, times)
        e = out.e[0]
        f_pooled = out.pooled_features[0]
        model.train(was_training)

        def occupancy(frame: int, queries: np.ndarray) -> np.ndarray:
            res = np.empty(len(queries))
            model.eval()
            try:
                with torch.no_grad():
                    for s in range(0, len(queries), self.chunk):
                        q = torch.as_tensor(queries[s:s + self.chunk], dtype=dtype)[None]
                        logits = model.occupancy_decoder(q, e[frame:frame + 1], f_pooled[frame:frame + 1], "eval")
                        res[s:s + self.chunk] = torch.sigmoid(logits[0].double()).numpy()
            finally:
                model.train(was_training)
            return res

        return SequencePrediction(sequence, out.flow[0].double().numpy(), occupancy)


class OraclePredictor:
    """Analytic stand-in for a perfectly trained model: a smoothed indicator
    ``1 / (1 + exp(sdf / eps))`` and ground-truth correspondences as flow."""

    def __init__(self, eps: float = 0.005):
        self.eps = eps

    def __call__(self, sequence: PointCloudSequence) -> SequencePrediction:
        shape = sequence.shape
        if shape is None:
            raise ValueError("oracle needs the sequence's generating shape")
        flows = np.zeros_like(sequence.points)
        for t in range(sequence.n_frames - 1):
            flows[t] = correspondence_displacement(shape, sequence.points[t], sequence.times[t], sequence.times[t + 1])

        def occupancy(frame: int, queries: np.ndarray) -> np.ndarray:
            sdf = shape.sdf(queries, float(sequence.times[frame]))
            return 0.5 * (1.0 - np.tanh(0.5 * sdf / self.eps))

        return SequencePrediction(sequence, flows, occupancy)
