"""Closest-point queries against triangle meshes, accelerated by a BVH.

Normals returned by queries are pseudo-normals: the face normal for hits in a
triangle interior, the mean of the adjacent face normals on an edge, and the
angle-weighted vertex normal on a vertex. That keeps ``sign(dot(q - p, n))``
a consistent inside/outside test for closed meshes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

AREA_EPS = 1e-14

# feature codes produced by the triangle kernel
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        if self.vertex_normals is None:
            self.vertex_normals = area_weighted_normals(self.vertices, self.triangles)
        else:
            n = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            self.vertex_normals = n / np.where(norm > 0, norm, 1.0)

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def face_normals(self) -> np.ndarray:
        return _face_normals(self.vertices, self.triangles)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)

    def transformed(self, scale: float, translation: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices * scale + translation, self.triangles, self.vertex_normals)

    def drop_degenerate(self) -> "TriangleMesh":
        keep = triangle_areas(self.vertices, self.triangles) > AREA_EPS
        if keep.all():
            return self
        return TriangleMesh(self.vertices, self.triangles[keep])


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def area_weighted_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    cross = np.cross(b - a, c - a)  # length = 2 * area
    acc = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(acc, triangles[:, i], cross)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


def angle_weighted_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    fn = _face_normals(vertices, triangles)
    acc = np.zeros_like(vertices)
    for i in range(3):
        p = vertices[triangles[:, i]]
        e1 = vertices[triangles[:, (i + 1) % 3]] - p
        e2 = vertices[triangles[:, (i + 2) % 3]] - p
        cosang = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(acc, triangles[:, i], fn * ang[:, None])
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


def edge_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Per-triangle edge pseudo-normals, shape (T, 3, 3) for edges ab, bc, ca."""
    fn = _face_normals(vertices, triangles)
    t = len(triangles)
    pairs = np.stack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1).reshape(-1, 2)
    keys = np.sort(pairs, axis=1)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    acc = np.zeros((inverse.max() + 1 if len(inverse) else 0, 3))
    np.add.at(acc, inverse, np.repeat(fn, 3, axis=0))
    out = acc[inverse]
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    out = out / np.where(norm > 0, norm, 1.0)
    return out.reshape(t, 3, 3)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Ericson's region test. Returns (x, y, z, feature)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2], VERT_A
    bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2], VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * abx, a[1] + v * aby, a[2] + v * abz, EDGE_AB
    cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2], VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz, EDGE_CA
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (
            b[0] + w * (c[0] - b[0]),
            b[1] + w * (c[1] - b[1]),
            b[2] + w * (c[2] - b[2]),
            EDGE_BC,
        )
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        a[0] + abx * v + acx * w,
        a[1] + aby * v + acy * w,
        a[2] + abz * v + acz * w,
        FACE,
    )


@nb.njit(cache=True)
def _build_bvh(centroids, tri_min, tri_max, leaf_size):
    n = centroids.shape[0]
    order = np.arange(n)
    cap = 2 * n + 1
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    stack = np.empty(cap, dtype=np.int64)
    n_nodes = 1
    start[0] = 0
    count[0] = n
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        c = count[node]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for k in range(s, s + c):
            t = order[k]
            for d in range(3):
                lo[d] = min(lo[d], tri_min[t, d])
                hi[d] = max(hi[d], tri_max[t, d])
                clo[d] = min(clo[d], centroids[t, d])
                chi[d] = max(chi[d], centroids[t, d])
        node_min[node] = lo
        node_max[node] = hi
        if c <= leaf_size:
            continue
        axis = 0
        ext = chi[0] - clo[0]
        for d in range(1, 3):
            if chi[d] - clo[d] > ext:
                ext = chi[d] - clo[d]
                axis = d
        seg = order[s : s + c].copy()
        keys = np.empty(c)
        for k in range(c):
            keys[k] = centroids[seg[k], axis]
        perm = np.argsort(keys, kind="mergesort")
        for k in range(c):
            order[s + k] = seg[perm[k]]
        half = c // 2
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        start[l_node] = s
        count[l_node] = half
        start[r_node] = s + half
        count[r_node] = c - half
        depth[l_node] = depth[node] + 1
        depth[r_node] = depth[node] + 1
        left[node] = l_node
        right[node] = r_node
        stack[sp] = l_node
        sp += 1
        stack[sp] = r_node
        sp += 1
    return (
        order,
        node_min[:n_nodes].copy(),
        node_max[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        start[:n_nodes].copy(),
        count[:n_nodes].copy(),
        depth[:n_nodes].max(),
    )


@nb.njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for d in range(3):
        if p[d] < lo[d]:
            t = lo[d] - p[d]
            d2 += t * t
        elif p[d] > hi[d]:
            t = p[d] - hi[d]
            d2 += t * t
    return d2


@nb.njit(cache=True)
def _query_one(p, verts, tris, order, node_min, node_max, left, right, start, count):
    best_d2 = np.inf
    best_t = -1
    best_feat = -1
    bx = 0.0
    by = 0.0
    bz = 0.0
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_dist2(p, node_min[node], node_max[node]) > best_d2:
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                t = order[k]
                x, y, z, feat = _closest_on_triangle(p, verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]])
                d2 = (p[0] - x) ** 2 + (p[1] - y) ** 2 + (p[2] - z) ** 2
                if d2 < best_d2 or (d2 == best_d2 and t < best_t):
                    best_d2 = d2
                    best_t = t
                    best_feat = feat
                    bx = x
                    by = y
                    bz = z
            continue
        l_node = left[node]
        r_node = right[node]
        dl = _box_dist2(p, node_min[l_node], node_max[l_node])
        dr = _box_dist2(p, node_min[r_node], node_max[r_node])
        # push the farther child first so the nearer one is popped next
        if dl <= dr:
            stack[sp] = r_node
            stack[sp + 1] = l_node
        else:
            stack[sp] = l_node
            stack[sp + 1] = r_node
        sp += 2
    return bx, by, bz, best_t, best_feat, best_d2


@nb.njit(cache=True)
def _query_many(queries, verts, tris, order, node_min, node_max, left, right, start, count):
    m = queries.shape[0]
    points = np.empty((m, 3))
    tri = np.empty(m, dtype=np.int64)
    feat = np.empty(m, dtype=np.int64)
    for i in range(m):
        x, y, z, t, f, _ = _query_one(queries[i], verts, tris, order, node_min, node_max, left, right, start, count)
        points[i, 0] = x
        points[i, 1] = y
        points[i, 2] = z
        tri[i] = t
        feat[i] = f
    return points, tri, feat


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

@dataclass
class SurfaceHit:
    point: np.ndarray
    normal: np.ndarray
    distance: float
    triangle: int
    side: float  # +1 along the normal, -1 against it, 0 on the surface


@dataclass
class SurfaceHits:
    points: np.ndarray
    normals: np.ndarray
    distances: np.ndarray
    triangles: np.ndarray
    sides: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> SurfaceHit:
        return SurfaceHit(
            self.points[i], self.normals[i], float(self.distances[i]), int(self.triangles[i]), float(self.sides[i])
        )


class BVH:
    """Immutable median-split bounding volume hierarchy over a triangle mesh."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 1):
        if len(mesh) == 0:
            raise MeshError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        v, t = mesh.vertices, mesh.triangles
        corners = v[t]
        (
            self.order,
            self.node_min,
            self.node_max,
            self.left,
            self.right,
            self.start,
            self.count,
            depth,
        ) = _build_bvh(corners.mean(axis=1), corners.min(axis=1), corners.max(axis=1), leaf_size)
        self.depth = int(depth)
        self.face_normals = mesh.face_normals
        self.edge_normals = edge_normals(v, t)
        self.vertex_normals = angle_weighted_normals(v, t)
        for arr in (self.order, self.node_min, self.node_max, self.face_normals):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.left)

    def query(self, queries: np.ndarray) -> SurfaceHits:
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        points, tri, feat = _query_many(
            q,
            self.mesh.vertices,
            self.mesh.triangles,
            self.order,
            self.node_min,
            self.node_max,
            self.left,
            self.right,
            self.start,
            self.count,
        )
        normals = feature_normals(self, tri, feat)
        offset = q - points
        distances = np.linalg.norm(offset, axis=1)
        sides = np.sign(np.einsum("ij,ij->i", offset, normals))
        return SurfaceHits(points, normals, distances, tri, sides)


def feature_normals(bvh: BVH, tri: np.ndarray, feat: np.ndarray) -> np.ndarray:
    out = bvh.face_normals[tri].copy()
    tris = bvh.mesh.triangles
    for code, corner in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
        sel = feat == code
        out[sel] = bvh.vertex_normals[tris[tri[sel], corner]]
    for code, edge in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
        sel = feat == code
        out[sel] = bvh.edge_normals[tri[sel], edge]
    return out


def build_bvh(mesh: TriangleMesh, leaf_size: int = 1) -> BVH:
    return BVH(mesh, leaf_size)


def closest_point(bvh: BVH, query: np.ndarray) -> SurfaceHit:
    return bvh.query(np.asarray(query, dtype=np.float64)[None])[0]


def closest_points(bvh: BVH, queries: np.ndarray) -> SurfaceHits:
    return bvh.query(queries)
