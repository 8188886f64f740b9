"""Analytic deforming shapes and the point-cloud sequences sampled from them.

Every shape is a rest ("canonical") solid plus a time-dependent bijection
``deform(q, t)`` of space, so occupancy and point flow are exact at any
(point, time).
"""
from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from . import container
from .geometry import as_points

SHAPE_LIMIT = 0.45
FLOW_SUPPORT_TOL = 1e-6


def _unit_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _rot_z(angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _capsule_sdf(q: np.ndarray, a, b, r: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = ab @ ab
    if denom == 0.0:
        return np.linalg.norm(q - a, axis=1) - r
    h = np.clip(((q - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(q - a - h[:, None] * ab, axis=1) - r


def _capsule_surface(n: int, half_length: float, r: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on an x-aligned capsule centred at the origin."""
    side = 2 * np.pi * r * 2 * half_length
    caps = 4 * np.pi * r * r
    on_side = rng.random(n) < side / (side + caps)
    pts = np.empty((n, 3))
    k = int(on_side.sum())
    ang = rng.uniform(0, 2 * np.pi, k)
    pts[on_side] = np.stack(
        [rng.uniform(-half_length, half_length, k), r * np.cos(ang), r * np.sin(ang)], axis=1
    )
    d = _unit_sphere(n - k, rng)
    d[:, 0] += np.sign(d[:, 0]) * half_length / r
    pts[~on_side] = d * r
    return pts


class DeformingShape(ABC):
    kind: ClassVar[str]

    def __init__(self, n_frames: int = 17):
        if n_frames < 2:
            raise ValueError("a deforming shape needs at least 2 frames")
        self.n_frames = int(n_frames)

    # -- rest configuration ------------------------------------------------
    @abstractmethod
    def canonical_sdf(self, q: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def canonical_surface(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    # -- motion ----------------------------------------------------------------
    @abstractmethod
    def deform(self, q: np.ndarray, t: float) -> np.ndarray: ...

    @abstractmethod
    def undeform(self, p: np.ndarray, t: float) -> np.ndarray: ...

    @abstractmethod
    def extent(self, t: float) -> float:
        """Largest absolute coordinate reached by the solid at time ``t``."""

    @abstractmethod
    def params(self) -> dict[str, Any]: ...

    # -- derived ---------------------------------------------------------------
    def sdf(self, p, t: float) -> np.ndarray:
        """Signed level-set function (negative inside). Exact distance only
        for rigid motions."""
        return self.canonical_sdf(self.undeform(as_points(p), t))

    def indicator(self, p, t: float) -> np.ndarray:
        return self.sdf(p, t) <= 0.0

    def surface_points(self, n: int, t: float, rng: np.random.Generator) -> np.ndarray:
        return self.deform(self.canonical_surface(n, rng), t)

    def check_bounds(self, limit: float = SHAPE_LIMIT) -> None:
        worst = max(self.extent(t) for t in np.linspace(0.0, 1.0, 101))
        if worst > limit + 1e-12:
            raise ValueError(f"shape out of bounds: extent {worst:.4f} exceeds {limit}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "n_frames": self.n_frames, **self.params()}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.params()}, n_frames={self.n_frames})"


class TranslatingSphere(DeformingShape):
    kind = "translating_sphere"

    def __init__(self, radius=0.2, start=(-0.15, 0.0, 0.0), velocity=(0.3, 0.0, 0.0), n_frames=17):
        super().__init__(n_frames)
        self.radius = float(radius)
        self.start = np.asarray(start, dtype=np.float64)
        self.velocity = np.asarray(velocity, dtype=np.float64)

    def center(self, t: float) -> np.ndarray:
        return self.start + self.velocity * t

    def canonical_sdf(self, q):
        return np.linalg.norm(q, axis=1) - self.radius

    def canonical_surface(self, n, rng):
        return _unit_sphere(n, rng) * self.radius

    def deform(self, q, t):
        return q + self.center(t)

    def undeform(self, p, t):
        return p - self.center(t)

    def extent(self, t):
        return float(np.abs(self.center(t)).max() + self.radius)

    def params(self):
        return {"radius": self.radius, "start": self.start.tolist(), "velocity": self.velocity.tolist()}


class BreathingSphere(DeformingShape):
    """Sphere at the origin with radius ``radius * scale(t)``,
    ``scale(t) = 1 + amplitude * sin(2 pi frequency t)``."""

    kind = "breathing_sphere"

    def __init__(self, radius=0.25, amplitude=0.2, frequency=1.0, n_frames=17):
        super().__init__(n_frames)
        self.radius = float(radius)
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)
        if not 0 <= abs(self.amplitude) < 1:
            raise ValueError("amplitude must lie in (-1, 1)")

    def scale(self, t: float) -> float:
        return 1.0 + self.amplitude * np.sin(2 * np.pi * self.frequency * t)

    def canonical_sdf(self, q):
        return np.linalg.norm(q, axis=1) - self.radius

    def canonical_surface(self, n, rng):
        return _unit_sphere(n, rng) * self.radius

    def deform(self, q, t):
        return q * self.scale(t)

    def undeform(self, p, t):
        return p / self.scale(t)

    def sdf(self, p, t):
        return np.linalg.norm(as_points(p), axis=1) - self.radius * self.scale(t)

    def extent(self, t):
        return self.radius * self.scale(t)

    def params(self):
        return {"radius": self.radius, "amplitude": self.amplitude, "frequency": self.frequency}


class TwoLobeCapsule(DeformingShape):
    """Capsule (two hemispherical lobes joined by a cylinder) spinning about z."""

    kind = "two_lobe_capsule"

    def __init__(self, half_length=0.2, radius=0.12, angular_rate=np.pi / 2, phase=0.0,
                 center=(0.0, 0.0, 0.0), n_frames=17):
        super().__init__(n_frames)
        self.half_length = float(half_length)
        self.radius = float(radius)
        self.angular_rate = float(angular_rate)
        self.phase = float(phase)
        self.center = np.asarray(center, dtype=np.float64)

    def angle(self, t):
        return self.phase + self.angular_rate * t

    def canonical_sdf(self, q):
        return _capsule_sdf(q, (-self.half_length, 0, 0), (self.half_length, 0, 0), self.radius)

    def canonical_surface(self, n, rng):
        return _capsule_surface(n, self.half_length, self.radius, rng)

    def deform(self, q, t):
        return q @ _rot_z(self.angle(t)).T + self.center

    def undeform(self, p, t):
        return (p - self.center) @ _rot_z(self.angle(t))

    def sdf(self, p, t):
        return self.canonical_sdf(self.undeform(as_points(p), t))

    def extent(self, t):
        ends = self.deform(np.array([[-self.half_length, 0, 0], [self.half_length, 0, 0]]), t)
        return float(np.abs(ends).max() + self.radius)

    def params(self):
        return {"half_length": self.half_length, "radius": self.radius,
                "angular_rate": self.angular_rate, "phase": self.phase,
                "center": self.center.tolist()}


class ArticulatedDumbbell(DeformingShape):
    """Two spherical lobes on a rod, bending at the origin about z.

    A rest point at polar angle ``phi`` (in the xy-plane) is rotated by
    ``bend(t) * w(phi)`` where ``w`` is 1 on the right lobe sector
    (``|phi| <= blend_start``), 0 on the left (``|phi| >= blend_end``) and a
    smoothstep in between. ``phi + bend * w(phi)`` stays strictly increasing,
    which keeps the map a bijection of space.
    """

    kind = "articulated_dumbbell"

    def __init__(self, half_length=0.25, lobe_radius=0.11, rod_radius=0.05, max_bend=np.pi / 3,
                 blend_start=np.deg2rad(30.0), blend_end=np.deg2rad(150.0), n_frames=17):
        super().__init__(n_frames)
        self.half_length = float(half_length)
        self.lobe_radius = float(lobe_radius)
        self.rod_radius = float(rod_radius)
        self.max_bend = float(max_bend)
        self.blend_start = float(blend_start)
        self.blend_end = float(blend_end)
        slope = 1.5 / (self.blend_end - self.blend_start)
        if abs(self.max_bend) * slope >= 1.0:
            raise ValueError("bend too large for the blend width; map would fold")

    def bend(self, t):
        return self.max_bend * t

    def _weight(self, phi):
        a = np.abs((phi + np.pi) % (2 * np.pi) - np.pi)
        u = np.clip((self.blend_end - a) / (self.blend_end - self.blend_start), 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u)

    def _primitives(self):
        L = self.half_length
        return [((-L, 0, 0), (-L, 0, 0), self.lobe_radius),
                ((L, 0, 0), (L, 0, 0), self.lobe_radius),
                ((-L, 0, 0), (L, 0, 0), self.rod_radius)]

    def canonical_sdf(self, q):
        return np.min([_capsule_sdf(q, a, b, r) for a, b, r in self._primitives()], axis=0)

    def canonical_surface(self, n, rng):
        L, rl, rr = self.half_length, self.lobe_radius, self.rod_radius
        areas = np.array([4 * np.pi * rl ** 2, 4 * np.pi * rl ** 2, 2 * np.pi * rr * 2 * L + 4 * np.pi * rr ** 2])
        out = []
        have = 0
        while have < n:
            m = 2 * (n - have) + 16
            which = rng.choice(3, size=m, p=areas / areas.sum())
            pts = np.empty((m, 3))
            for k in range(2):
                sel = which == k
                pts[sel] = _unit_sphere(int(sel.sum()), rng) * rl + np.array([(-L, L)[k], 0, 0])
            sel = which == 2
            pts[sel] = _capsule_surface(int(sel.sum()), L, rr, rng)
            others = np.full(m, np.inf)
            prims = self._primitives()
            for k in range(3):
                sel = which == k
                for j in range(3):
                    if j != k:
                        a, b, r = prims[j]
                        others[sel] = np.minimum(others[sel], _capsule_sdf(pts[sel], a, b, r))
            pts = pts[others >= 0.0]
            out.append(pts)
            have += len(pts)
        return np.concatenate(out)[:n] if out else np.empty((0, 3))

    def deform(self, q, t):
        q = np.asarray(q, dtype=np.float64)
        rho = np.hypot(q[:, 0], q[:, 1])
        phi = np.arctan2(q[:, 1], q[:, 0])
        psi = phi + self.bend(t) * self._weight(phi)
        return np.stack([rho * np.cos(psi), rho * np.sin(psi), q[:, 2]], axis=1)

    def undeform(self, p, t):
        p = np.asarray(p, dtype=np.float64)
        theta = self.bend(t)
        rho = np.hypot(p[:, 0], p[:, 1])
        psi = np.arctan2(p[:, 1], p[:, 0])
        # phi + theta*w(phi) is increasing; the preimage lies between psi - max(theta,0) and psi - min(theta,0)
        lo = psi - max(theta, 0.0)
        hi = psi - min(theta, 0.0)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            g = mid + theta * self._weight(mid)
            below = g < psi
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        phi = 0.5 * (lo + hi)
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), p[:, 2]], axis=1)

    def extent(self, t):
        centers = self.deform(np.array([[-self.half_length, 0, 0], [self.half_length, 0, 0]]), t)
        return float(np.abs(centers).max() + self.lobe_radius)

    def params(self):
        return {"half_length": self.half_length, "lobe_radius": self.lobe_radius,
                "rod_radius": self.rod_radius, "max_bend": self.max_bend,
                "blend_start": self.blend_start, "blend_end": self.blend_end}


SHAPES: dict[str, type[DeformingShape]] = {
    cls.kind: cls for cls in (TranslatingSphere, BreathingSphere, TwoLobeCapsule, ArticulatedDumbbell)
}
CONVEX_KINDS = ("translating_sphere", "breathing_sphere", "two_lobe_capsule")


def make_shape(kind: str, **params) -> DeformingShape:
    if kind not in SHAPES:
        raise ValueError(f"unknown shape kind {kind!r}; choose from {sorted(SHAPES)}")
    return SHAPES[kind](**params)


def shape_from_dict(d: dict[str, Any]) -> DeformingShape:
    d = dict(d)
    return make_shape(d.pop("kind"), **d)


def random_shape(kind: str, rng: np.random.Generator, n_frames: int = 17) -> DeformingShape:
    """Draw a shape of the given family with randomised parameters."""
    if kind == "translating_sphere":
        r = rng.uniform(0.15, 0.22)
        travel = SHAPE_LIMIT - r
        d = _unit_sphere(1, rng)[0]
        v = d * rng.uniform(0.1, 2 * travel / np.abs(d).max() * 0.9)
        return TranslatingSphere(r, -v / 2, v, n_frames=n_frames)
    if kind == "breathing_sphere":
        r = rng.uniform(0.18, 0.28)
        amp = rng.uniform(0.05, min(0.25, SHAPE_LIMIT / r - 1.0))
        return BreathingSphere(r, amp, rng.uniform(0.5, 1.0), n_frames=n_frames)
    if kind == "two_lobe_capsule":
        r = rng.uniform(0.08, 0.12)
        hl = rng.uniform(0.12, min(0.25, SHAPE_LIMIT - r - 0.01))
        return TwoLobeCapsule(hl, r, rng.uniform(-np.pi / 2, np.pi / 2), rng.uniform(0, 2 * np.pi),
                              n_frames=n_frames)
    if kind == "articulated_dumbbell":
        bend = rng.uniform(np.pi / 6, np.pi / 3) * rng.choice([-1.0, 1.0])
        return ArticulatedDumbbell(half_length=rng.uniform(0.22, 0.28), lobe_radius=rng.uniform(0.09, 0.12),
                                   rod_radius=rng.uniform(0.04, 0.06), max_bend=bend, n_frames=n_frames)
    raise ValueError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------------------
# sequences


@dataclass(frozen=True)
class PointCloudFrame:
    points: np.ndarray
    time: float


@dataclass
class PointCloudSequence:
    """``points`` has shape (T, N, 3); ``ids`` labels each of the N
    trajectories identically in every frame."""

    points: np.ndarray
    times: np.ndarray
    ids: np.ndarray | None = None
    shape: DeformingShape | None = None
    settings: dict[str, Any] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be (T, N, 3), got {self.points.shape}")
        if len(self.times) != len(self.points):
            raise ValueError("one time stamp per frame required")
        if self.points.shape[1] < 1:
            raise ValueError("frames must hold at least one point")
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.times)):
            raise ValueError("sequence contains non-finite values")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("frame times must be strictly increasing")
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
            if len(self.ids) != self.points.shape[1]:
                raise ValueError("one correspondence id per point required")

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    @property
    def frames(self) -> list[PointCloudFrame]:
        return [PointCloudFrame(p, float(t)) for p, t in zip(self.points, self.times)]


@dataclass(frozen=True)
class OccupancySamples:
    points: np.ndarray
    labels: np.ndarray
    time: float


@dataclass(frozen=True)
class FlowSamples:
    points_from: np.ndarray
    points_to: np.ndarray
    t_from: float
    t_to: float

    @property
    def vectors(self) -> np.ndarray:
        return self.points_to - self.points_from


def frame_times(n_frames: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "even":
        return np.linspace(0.0, 1.0, n_frames)
    if mode == "uneven":
        while True:
            inner = np.sort(rng.uniform(0.0, 1.0, n_frames - 2))
            times = np.concatenate([[0.0], inner, [1.0]])
            if np.all(np.diff(times) > 1e-6):
                return times
    raise ValueError(f"temporal mode must be 'even' or 'uneven', got {mode!r}")


def sample_surface_sequence(shape: DeformingShape, n_points: int, temporal_mode: str = "even",
                            noise_sigma: float = 0.0, seed: int = 0) -> PointCloudSequence:
    if n_points < 10:
        raise ValueError("n_points must be at least 10")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    shape.check_bounds()
    rng = np.random.default_rng(seed)
    times = frame_times(shape.n_frames, temporal_mode, rng)
    rest = shape.canonical_surface(n_points, rng)
    pts = np.stack([shape.deform(rest, t) for t in times])
    if noise_sigma > 0:
        pts = np.clip(pts + rng.normal(scale=noise_sigma, size=pts.shape), -0.5, 0.5)
    settings = {"kind": shape.kind, "n_points": n_points, "n_frames": shape.n_frames,
                "temporal_mode": temporal_mode, "noise_sigma": noise_sigma, "seed": seed}
    return PointCloudSequence(pts, times, np.arange(n_points), shape, settings)


def sample_occupancy_queries(shape: DeformingShape, time: float, n_uniform: int, n_near_surface: int,
                             band: float = 0.02, seed: int | np.random.Generator = 0) -> OccupancySamples:
    if n_uniform + n_near_surface < 1:
        raise ValueError("at least one query required")
    if band <= 0:
        raise ValueError("band must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    uni = rng.uniform(-0.5, 0.5, size=(n_uniform, 3))
    near = shape.surface_points(n_near_surface, time, rng)
    near = np.clip(near + rng.normal(scale=band, size=near.shape), -0.5, 0.5)
    pts = np.concatenate([uni, near])
    return OccupancySamples(pts, shape.indicator(pts, time).astype(np.float64), float(time))


def correspondence_displacement(shape: DeformingShape, points, t_from: float, t_to: float) -> np.ndarray:
    """Displacement of each point under the shape's deformation from ``t_from``
    to ``t_to``, without the surface-support check (noisy inputs)."""
    p = as_points(points)
    return shape.deform(shape.undeform(p, t_from), t_to) - p


def ground_truth_flow(shape: DeformingShape, points, t_from: float, t_to: float) -> FlowSamples:
    p = as_points(points)
    outside = np.flatnonzero(shape.sdf(p, t_from) > FLOW_SUPPORT_TOL)
    if len(outside):
        raise ValueError(f"points outside the shape at t={t_from}: indices {outside.tolist()}")
    return FlowSamples(p, shape.deform(shape.undeform(p, t_from), t_to), float(t_from), float(t_to))


# ---------------------------------------------------------------------------
# persistence


def save_sequence(path: str | Path, seq: PointCloudSequence) -> None:
    path = Path(path)
    arrays = {"times": seq.times, "points": seq.points}
    if seq.ids is not None:
        arrays["ids"] = seq.ids
    meta = {"name": seq.name, "shape": seq.shape.to_dict() if seq.shape is not None else None}
    container.save(path, arrays, meta)
    path.with_suffix(".json").write_text(json.dumps(seq.settings, indent=2, sort_keys=True) + "\n")


def load_sequence(path: str | Path) -> PointCloudSequence:
    path = Path(path)
    arrays, meta = container.load(path)
    sidecar = path.with_suffix(".json")
    settings = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    shape = shape_from_dict(meta["shape"]) if meta.get("shape") else None
    return PointCloudSequence(arrays["points"], arrays["times"], arrays.get("ids"), shape, settings,
                              meta.get("name", path.stem))


def save_dataset(directory: str | Path, sequences: list[PointCloudSequence]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        name = seq.name or f"seq_{i:05d}"
        p = directory / f"{name}.f4d"
        save_sequence(p, seq)
        paths.append(p)
    return paths


def load_dataset(directory: str | Path) -> list[PointCloudSequence]:
    directory = Path(directory)
    files = sorted(directory.glob("*.f4d"))
    if not files:
        raise FileNotFoundError(f"no sequences found in {directory}")
    return [load_sequence(p) for p in files]


def generate_dataset(kinds: list[str], n_per_kind: int, n_frames: int, n_points: int, seed: int,
                     temporal_mode: str = "even", noise_sigma: float = 0.0) -> list[PointCloudSequence]:
    """Randomised sequences, ``n_per_kind`` of each family, fully determined by ``seed``."""
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(kinds) * n_per_kind)
    out = []
    for k, kind in enumerate(kinds):
        for j in range(n_per_kind):
            ss = children[k * n_per_kind + j]
            rng = np.random.default_rng(ss)
            shape = random_shape(kind, rng, n_frames)
            seq_seed = int(rng.integers(2 ** 31))
            seq = sample_surface_sequence(shape, n_points, temporal_mode, noise_sigma, seq_seed)
            seq.name = f"{kind}_{j:04d}"
            out.append(seq)
    return out
