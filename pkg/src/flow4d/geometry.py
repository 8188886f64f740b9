"""Geometric primitives: triangle meshes, nearest-neighbour search, containment.

Points are plain ``(..., 3)`` float64 arrays. Shapes live in the working cube
``[-0.5, 0.5]^3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

CUBE_MIN = -0.5
CUBE_MAX = 0.5


def as_points(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed volume; positive for outward-oriented closed meshes."""
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[:, ::-1])

    def canonical(self) -> "TriangleMesh":
        """Vertices sorted lexicographically, faces rotated to start at their
        smallest index (orientation kept) and sorted."""
        order = np.lexsort(self.vertices.T[::-1])
        remap = np.empty(len(order), dtype=np.int64)
        remap[order] = np.arange(len(order))
        f = remap[self.faces]
        shift = np.argmin(f, axis=1)
        rows = np.arange(len(f))[:, None]
        f = f[rows, (shift[:, None] + np.arange(3)) % 3]
        f = f[np.lexsort(f.T[::-1])]
        return TriangleMesh(self.vertices[order], f)

    def edge_face_counts(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_face_counts() == 2))


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(v) * radius + np.asarray(center, dtype=np.float64), np.array(faces))


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on the mesh surface. Returns (points, face_ids)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    face_ids = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    face_ids = np.minimum(face_ids, len(areas) - 1)
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    tri = mesh.triangles()[face_ids]
    pts = tri[:, 0] + u[:, :1] * (tri[:, 1] - tri[:, 0]) + u[:, 1:] * (tri[:, 2] - tri[:, 0])
    return pts, face_ids


# ---------------------------------------------------------------------------
# nearest neighbours


class NearestNeighborIndex:
    """Exact nearest-point queries over a fixed point set.

    Ties resolve to the lowest insertion index. Returned distances are
    recomputed directly from the coordinates.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            raise ValueError("empty point set")
        pts = as_points(pts)
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = as_points(queries, "queries")
        if len(self.points) == 1:
            idx = np.zeros(len(q), dtype=np.int64)
        else:
            d, i = self._tree.query(q, k=2)
            idx = i[:, 0].astype(np.int64)
            tie = d[:, 1] <= d[:, 0] * (1.0 + 1e-9) + 1e-12
            for j in np.flatnonzero(tie):
                cand = np.asarray(
                    sorted(self._tree.query_ball_point(q[j], d[j, 0] * (1.0 + 1e-9) + 1e-12)),
                    dtype=np.int64,
                )
                cd = np.sqrt(((self.points[cand] - q[j]) ** 2).sum(axis=1))
                idx[j] = cand[np.argmin(cd)]
        dist = np.sqrt(((self.points[idx] - q) ** 2).sum(axis=1))
        return idx, dist


def build_nn_index(points) -> NearestNeighborIndex:
    return NearestNeighborIndex(points)


def nearest(index: NearestNeighborIndex, q) -> tuple[np.ndarray, float]:
    idx, dist = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return index.points[idx[0]].copy(), float(dist[0])


# ---------------------------------------------------------------------------
# containment by ray parity


def _rotation_to_z(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(d, z)
    c = float(d @ z)
    if np.linalg.norm(v) < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * (1.0 / (1.0 + c))


def _ray_parity_z(tri: np.ndarray, q: np.ndarray, chunk: int = 20000) -> tuple[np.ndarray, np.ndarray]:
    """Count crossings of +z rays from ``q`` with triangles ``tri`` (F, 3, 3).

    Returns (odd, degenerate) boolean arrays over the queries.
    """
    nq = len(q)
    odd = np.zeros(nq, dtype=bool)
    degenerate = np.zeros(nq, dtype=bool)
    xy = tri[:, :, :2]
    area2 = (xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1]) - (
        xy[:, 1, 1] - xy[:, 0, 1]
    ) * (xy[:, 2, 0] - xy[:, 0, 0])
    keep = np.abs(area2) > 1e-300
    tri, xy, area2 = tri[keep], xy[keep], area2[keep]
    nf = len(tri)
    if nf == 0 or nq == 0:
        return odd, degenerate

    lo = xy.min(axis=1)
    hi = xy.max(axis=1)
    glo = lo.min(axis=0)
    ghi = hi.max(axis=0)
    g = int(np.clip(np.sqrt(nf), 1, 512))
    cell = np.maximum((ghi - glo) / g, 1e-12)
    i0 = np.clip(((lo - glo) / cell).astype(np.int64), 0, g - 1)
    i1 = np.clip(((hi - glo) / cell).astype(np.int64), 0, g - 1)
    nx = i1[:, 0] - i0[:, 0] + 1
    ny = i1[:, 1] - i0[:, 1] + 1
    cnt = nx * ny
    tri_rep = np.repeat(np.arange(nf), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    cx = i0[tri_rep, 0] + local % nx[tri_rep]
    cy = i0[tri_rep, 1] + local // nx[tri_rep]
    cell_id = cx * g + cy
    order = np.argsort(cell_id, kind="stable")
    cell_sorted = cell_id[order]
    tri_sorted = tri_rep[order]
    starts = np.searchsorted(cell_sorted, np.arange(g * g), side="left")
    ends = np.searchsorted(cell_sorted, np.arange(g * g), side="right")

    for s in range(0, nq, chunk):
        qs = q[s : s + chunk]
        qc = np.floor((qs[:, :2] - glo) / cell).astype(np.int64)
        inside_grid = np.all((qc >= 0) & (qc < g), axis=1)
        qc = np.clip(qc, 0, g - 1)
        cid = qc[:, 0] * g + qc[:, 1]
        st = starts[cid]
        n_c = np.where(inside_grid, ends[cid] - st, 0)
        if n_c.sum() == 0:
            continue
        q_rep = np.repeat(np.arange(len(qs)), n_c)
        loc = np.arange(n_c.sum()) - np.repeat(np.cumsum(n_c) - n_c, n_c)
        f_rep = tri_sorted[st[q_rep] + loc]

        p = qs[q_rep]
        t = xy[f_rep]
        a2 = area2[f_rep]
        sgn = np.sign(a2)
        e = np.empty((len(p), 3))
        for k in range(3):
            a = t[:, k]
            b = t[:, (k + 1) % 3]
            e[:, k] = (b[:, 0] - a[:, 0]) * (p[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (p[:, 0] - a[:, 0])
        e *= sgn[:, None]
        tol = 1e-10 * np.abs(a2)
        strictly = np.all(e > tol[:, None], axis=1)
        touching = np.all(e > -tol[:, None], axis=1) & ~strictly
        # barycentric weight of vertex k is the edge function opposite to it
        w = np.stack([e[:, 1], e[:, 2], e[:, 0]], axis=1) / np.abs(a2)[:, None]
        z_hit = (w * tri[f_rep][:, :, 2]).sum(axis=1)
        above = z_hit > p[:, 2]
        hits = strictly & above
        crossings = np.bincount(q_rep, weights=hits, minlength=len(qs)).astype(np.int64)
        bad = np.bincount(q_rep, weights=touching & (z_hit > p[:, 2] - 1e-12), minlength=len(qs)) > 0
        odd[s : s + chunk] = crossings % 2 == 1
        degenerate[s : s + chunk] = bad
    return odd, degenerate


def points_in_mesh(mesh: TriangleMesh, queries, direction=(0.0, 0.0, 1.0), seed: int = 0,
                   max_recasts: int = 8) -> np.ndarray:
    """Ray-parity containment for many queries.

    Queries whose ray grazes an edge or vertex are recast along a jittered
    direction.
    """
    q = as_points(queries, "queries")
    if mesh.is_empty:
        return np.zeros(len(q), dtype=bool)
    rot = _rotation_to_z(direction)
    tri = mesh.triangles() @ rot.T
    inside, degenerate = _ray_parity_z(tri, q @ rot.T)
    rng = np.random.default_rng(seed)
    todo = np.flatnonzero(degenerate)
    base = np.asarray(direction, dtype=np.float64)
    base = base / np.linalg.norm(base)
    for _ in range(max_recasts):
        if len(todo) == 0:
            break
        d = base + 0.1 * rng.normal(size=3)
        rot = _rotation_to_z(d)
        odd, deg = _ray_parity_z(mesh.triangles() @ rot.T, q[todo] @ rot.T)
        inside[todo] = odd
        todo = todo[deg]
    return inside


def point_in_mesh(mesh: TriangleMesh, q, direction=(0.0, 0.0, 1.0)) -> bool:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape != (3,) or not np.all(np.isfinite(q)):
        raise ValueError("query point must be a finite 3-vector")
    return bool(points_in_mesh(mesh, q[None], direction=direction)[0])


# ---------------------------------------------------------------------------
# mesh and point-cloud files


def write_obj(path: str | Path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path: str | Path, mesh: TriangleMesh | None = None, points=None,
              vectors=None, vector_names=("vx", "vy", "vz")) -> None:
    """Binary little-endian PLY. Either a mesh, or a point cloud with optional
    per-vertex vector attributes."""
    if mesh is not None:
        verts = mesh.vertices
        faces = mesh.faces
    else:
        verts = as_points(points)
        faces = np.zeros((0, 3), dtype=np.int64)
    props = ["x", "y", "z"]
    data = verts.astype("<f4")
    if vectors is not None:
        vec = np.asarray(vectors, dtype=np.float64).reshape(len(verts), 3)
        props += list(vector_names)
        data = np.concatenate([data, vec.astype("<f4")], axis=1)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(verts)}"]
    header += [f"property float {p}" for p in props]
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    body = np.ascontiguousarray(data).tobytes()
    if len(faces):
        rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        rec["n"] = 3
        rec["i"] = faces
        body += rec.tobytes()
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + body)


def read_ply(path: str | Path) -> tuple[TriangleMesh, dict[str, np.ndarray]]:
    """Read a binary little-endian PLY written by :func:`write_ply`.

    Returns the mesh (possibly without faces) and all vertex properties.
    """
    blob = Path(path).read_bytes()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    n_vert = n_face = 0
    vprops: list[str] = []
    current = None
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert, current = int(parts[2]), "vertex"
        elif parts[:2] == ["element", "face"]:
            n_face, current = int(parts[2]), "face"
        elif parts[0] == "property" and current == "vertex":
            if parts[1] != "float":
                raise ValueError("only float vertex properties are supported")
            vprops.append(parts[2])
    vdata = np.frombuffer(blob, dtype="<f4", count=n_vert * len(vprops), offset=end)
    vdata = vdata.reshape(n_vert, len(vprops)).astype(np.float64)
    off = end + vdata.size * 4
    faces = np.zeros((0, 3), dtype=np.int64)
    if n_face:
        rec = np.frombuffer(blob, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=n_face, offset=off)
        if np.any(rec["n"] != 3):
            raise ValueError("only triangle faces are supported")
        faces = rec["i"].astype(np.int64)
    props = {name: vdata[:, k] for k, name in enumerate(vprops)}
    verts = np.stack([props["x"], props["y"], props["z"]], axis=1)
    return TriangleMesh(verts, faces), props

