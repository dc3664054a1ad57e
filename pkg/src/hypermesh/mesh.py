"""Triangle meshes: container, icosphere construction, inside tests and OBJ export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# ray origin offset for the parity test, keeps rays off shared edges and vertices
RAY_JITTER = np.array([0.0, 1e-9, 0.61e-9])


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    keypoints: tuple[int, ...] = ()

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.keypoints = tuple(int(k) for k in self.keypoints)
        n = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face index out of range")
        if len(set(self.keypoints)) != len(self.keypoints):
            raise ValueError("keypoints must be distinct")
        if any(not 0 <= k < n for k in self.keypoints):
            raise ValueError("keypoint index out of range")

    def check_faces(self, min_area: float = 1e-16) -> None:
        """Reject degenerate triangles."""
        areas = triangle_areas(self.vertices, self.faces)
        if (areas <= min_area).any():
            raise ValueError(f"degenerate triangle at face {int(np.argmax(areas <= min_area))}")

    def is_watertight(self) -> bool:
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces, self.keypoints)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def triangle_areas(vertices, faces) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def icosphere(subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere; ``10 * 4**s + 2`` vertices."""
    t = (1 + 5 ** 0.5) / 2
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def sphere_mesh(radius: float, center=(0.0, 0.0, 0.0), subdivisions: int = 2) -> Mesh:
    v, f = icosphere(subdivisions)
    return Mesh(v * radius + np.asarray(center, dtype=np.float64), f)


# -- geometric queries -------------------------------------------------------

def ray_crossings(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Number of crossings of the +x ray from each (jittered) point, Möller-Trumbore."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64)) + RAY_JITTER
    tri = mesh.triangles
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    d = np.array([1.0, 0.0, 0.0])
    pvec = np.cross(d, e2)  # (F, 3)
    det = (e1 * pvec).sum(-1)  # (F,)
    ok = np.abs(det) > 1e-18
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = points[:, None, :] - v0[None]  # (P, F, 3)
    u = (tvec * pvec).sum(-1) * inv
    qvec = np.cross(tvec, e1[None])
    v = (qvec @ d) * inv
    t = (qvec * e2[None]).sum(-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return hit.sum(axis=1)


def _chunked(fn, points, mesh, chunk=2048):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) <= chunk:
        return fn(points, mesh)
    return np.concatenate([fn(points[i:i + chunk], mesh) for i in range(0, len(points), chunk)])


def contains(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    return _chunked(ray_crossings, points, mesh) % 2 == 1


def point_triangle_distance(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Distance from each point to the closest triangle, ``(P,)``."""
    return _chunked(_point_triangle_distance, points, mesh)


def _point_triangle_distance(points, mesh):
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, None, :]
    tri = mesh.triangles[None]
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    closest = _closest_on_triangle(p, a, b, c)
    return np.sqrt(((closest - p) ** 2).sum(-1)).min(axis=1)


def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p, by Voronoi region (broadcasting)."""
    dot = lambda x, y: (x * y).sum(-1, keepdims=True)  # noqa: E731
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        result = a + ab * v_in + ac * w_in

        # edge regions
        t_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        result = np.where(on_ab, a + ab * t_ab, result)
        t_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        result = np.where(on_ac, a + ac * t_ac, result)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        result = np.where(on_bc, b + (c - b) * t_bc, result)

    # vertex regions take precedence
    result = np.where((d6 >= 0) & (d5 <= d6), c, result)
    result = np.where((d3 >= 0) & (d4 <= d3), b, result)
    result = np.where((d1 <= 0) & (d2 <= 0), a, result)
    return result


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))
