"""Multiresolution iso-surface extraction followed by marching cubes.

The coarse grid is evaluated everywhere. Each refinement step doubles the
resolution: values are trilinearly upsampled, and the field is evaluated
exactly at every vertex of the cells that straddle the threshold (dilated by
one cell). Regions away from the surface keep interpolated values, which stay
on the same side of the threshold as their coarse corners.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from skimage import measure

from .geometry import CUBE_MAX, CUBE_MIN, TriangleMesh

Field = Callable[[np.ndarray], np.ndarray]


class DegenerateFieldWarning(UserWarning):
    """The field equals the threshold everywhere, so no surface is defined."""


@dataclass
class OccupancyGrid:
    values: np.ndarray                 # (R+1, R+1, R+1) probabilities at grid vertices
    tau: float = 0.5
    bounds: tuple[float, float] = (CUBE_MIN, CUBE_MAX)
    known: np.ndarray | None = None    # vertices evaluated exactly
    active_cells: list[int] = field(default_factory=list)  # straddling cells per level
    n_evaluations: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 3:
            raise ValueError("grid resolution must be at least 2 cells per axis")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0] - 1

    @property
    def spacing(self) -> float:
        return (self.bounds[1] - self.bounds[0]) / self.resolution


def grid_points(resolution: int, bounds=(CUBE_MIN, CUBE_MAX)) -> np.ndarray:
    axis = np.linspace(bounds[0], bounds[1], resolution + 1)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)


def _evaluate(field_fn: Field, points: np.ndarray, batch_points: int) -> np.ndarray:
    out = np.empty(len(points))
    for s in range(0, len(points), batch_points):
        out[s:s + batch_points] = np.asarray(field_fn(points[s:s + batch_points]), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("occupancy field returned non-finite values")
    return out


def straddling_cells(values: np.ndarray, tau: float) -> np.ndarray:
    """Cells whose eight corners are not all strictly on one side of tau."""
    corners = [values[i:values.shape[0] - 1 + i, j:values.shape[1] - 1 + j, k:values.shape[2] - 1 + k]
               for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    lo = np.minimum.reduce(corners)
    hi = np.maximum.reduce(corners)
    return (lo <= tau) & (hi >= tau)


def _upsample(values: np.ndarray) -> np.ndarray:
    """Exact trilinear upsampling onto the grid with twice the resolution."""
    for axis in range(3):
        v = np.moveaxis(values, axis, 0)
        out = np.empty((2 * v.shape[0] - 1,) + v.shape[1:])
        out[::2] = v
        out[1::2] = 0.5 * (v[:-1] + v[1:])
        values = np.moveaxis(out, 0, axis)
    return values


def _cells_to_vertices(cells: np.ndarray) -> np.ndarray:
    r = cells.shape[0]
    verts = np.zeros((r + 1,) * 3, dtype=bool)
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                verts[i:r + i, j:r + j, k:r + k] |= cells
    return verts


def _warn_if_degenerate(values: np.ndarray, tau: float) -> None:
    if np.all(values == tau):
        warnings.warn("occupancy field equals the threshold everywhere; the extracted mesh is degenerate",
                      DegenerateFieldWarning, stacklevel=3)


def dense_evaluate(field_fn: Field, resolution: int, tau: float = 0.5, bounds=(CUBE_MIN, CUBE_MAX),
                   batch_points: int = 262144) -> OccupancyGrid:
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    pts = grid_points(resolution, bounds).reshape(-1, 3)
    values = _evaluate(field_fn, pts, batch_points).reshape((resolution + 1,) * 3)
    _warn_if_degenerate(values, tau)
    return OccupancyGrid(values, tau, tuple(bounds), np.ones(values.shape, dtype=bool),
                         [int(straddling_cells(values, tau).sum())], len(pts))


def mise_evaluate(field_fn: Field, start_res: int = 32, upsample_steps: int = 2, tau: float = 0.5,
                  bounds=(CUBE_MIN, CUBE_MAX), batch_points: int = 262144) -> OccupancyGrid:
    if start_res < 8:
        raise ValueError("start_res must be at least 8")
    if upsample_steps < 0:
        raise ValueError("upsample_steps must be non-negative")
    grid = dense_evaluate(field_fn, start_res, tau, bounds, batch_points)
    values, known, n_eval = grid.values, grid.known, grid.n_evaluations
    active_counts = list(grid.active_cells)
    res = start_res
    for _ in range(upsample_steps):
        cells = straddling_cells(values, tau)
        cells = ndimage.binary_dilation(cells, structure=np.ones((3, 3, 3), dtype=bool))
        fine_cells = np.repeat(np.repeat(np.repeat(cells, 2, 0), 2, 1), 2, 2)
        values = _upsample(values)
        new_known = np.zeros(values.shape, dtype=bool)
        new_known[::2, ::2, ::2] = known
        known = new_known
        res *= 2
        todo = _cells_to_vertices(fine_cells) & ~known
        idx = np.nonzero(todo)
        if len(idx[0]):
            h = (bounds[1] - bounds[0]) / res
            pts = bounds[0] + np.stack(idx, axis=-1) * h
            values[idx] = _evaluate(field_fn, pts, batch_points)
            known[idx] = True
            n_eval += len(idx[0])
        active_counts.append(int(straddling_cells(values, tau).sum()))
    return OccupancyGrid(values, tau, tuple(bounds), known, active_counts, n_eval)


def marching_cubes(grid: OccupancyGrid) -> TriangleMesh:
    """Triangle mesh of the tau level set, oriented with normals pointing
    towards decreasing occupancy (outwards). Empty when nothing crosses."""
    v = grid.values
    if not (v.min() < grid.tau < v.max()):
        return TriangleMesh.empty()
    h = grid.spacing
    verts, faces, _, _ = measure.marching_cubes(v, level=grid.tau, spacing=(h, h, h),
                                                gradient_direction="ascent", allow_degenerate=False)
    verts = verts.astype(np.float64) + grid.bounds[0]
    if len(faces) == 0:
        return TriangleMesh.empty()
    used, faces = np.unique(faces, return_inverse=True)
    return TriangleMesh(verts[used], faces.reshape(-1, 3))


def extract_mesh(field_fn: Field, tau: float = 0.5, start_res: int = 32, upsample_steps: int = 2,
                 bounds=(CUBE_MIN, CUBE_MAX)) -> TriangleMesh:
    return marching_cubes(mise_evaluate(field_fn, start_res, upsample_steps, tau, bounds))


def extract_sequence(prediction, tau: float = 0.5, start_res: int = 32, upsample_steps: int = 2,
                     frames: Sequence[int] | None = None) -> list[TriangleMesh]:
    """One mesh per frame of a SequencePrediction (see ``model``)."""
    frames = range(prediction.n_frames) if frames is None else frames
    return [extract_mesh(prediction.field(t), tau, start_res, upsample_steps) for t in frames]
