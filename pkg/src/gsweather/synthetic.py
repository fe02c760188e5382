"""Small procedural scenes (ground plane, optional box) for demos and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .gaussian_core import SH_C0, Splats
from .mesh_geometry import TriangleMesh
from .scene_io import GaussianScene, look_at, save_cameras, save_gaussian_ply, save_mesh_obj

BOX_TRIANGLES = np.array([
    [0, 2, 1], [0, 3, 2],  # -z
    [4, 5, 6], [4, 6, 7],  # +z
    [0, 1, 5], [0, 5, 4],  # -y
    [3, 7, 6], [3, 6, 2],  # +y
    [0, 4, 7], [0, 7, 3],  # -x
    [1, 2, 6], [1, 6, 5],  # +x
])


def box_mesh(lo, hi) -> TriangleMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]], [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]], [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    return TriangleMesh(corners, BOX_TRIANGLES.copy())


def quad_mesh(half: float, height: float = 0.0) -> TriangleMesh:
    v = np.array([[-half, height, -half], [half, height, -half], [half, height, half], [-half, height, half]])
    return TriangleMesh(v, np.array([[0, 2, 1], [0, 3, 2]]))


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def _surface_splats(points: np.ndarray, normals: np.ndarray, colors: np.ndarray, size: float) -> Splats:
    """Flat discs lying on the surface (thin along the normal), degree-0 SH colour."""
    from .collision import tangent_frame
    from .gaussian_core import quaternion_from_matrix

    n = len(points)
    rot = quaternion_from_matrix(tangent_frame(normals))
    scales = np.tile([size, 0.15 * size, size], (n, 1))
    sh = ((colors - 0.5) / SH_C0)[:, None, :]
    return Splats(points, rot, scales, np.full(n, 0.9), sh=sh)


def ground_scene(half: float = 1.0, spacing: float = 0.05, box: float | None = 0.5,
                 seed: int = 0) -> tuple[GaussianScene, TriangleMesh]:
    """Checkered ground of half-width ``half`` at y = 0, plus a centred box of side ``box``."""
    rng = np.random.default_rng(seed)
    g = np.arange(-half + spacing / 2, half, spacing)
    X, Z = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), np.zeros(X.size), Z.ravel()], axis=1)
    check = ((np.floor(X.ravel() / 0.25) + np.floor(Z.ravel() / 0.25)) % 2)[:, None]
    colors = np.where(check > 0, [0.35, 0.5, 0.3], [0.45, 0.6, 0.35]) + rng.uniform(-0.03, 0.03, (len(pts), 3))
    parts = [_surface_splats(pts, np.tile([0.0, 1.0, 0.0], (len(pts), 1)), colors, 0.6 * spacing)]
    meshes = [quad_mesh(half)]
    if box:
        h = box / 2
        lo, hi = np.array([-h, 0.0, -h]), np.array([h, box, h])
        m = box_mesh(lo, hi)
        meshes.append(m)
        k = max(2, int(round(box / spacing)))
        t = (np.arange(k) + 0.5) / k
        U, V = np.meshgrid(t, t, indexing="ij")
        u, v = U.ravel(), V.ravel()
        faces = []
        for axis in range(3):
            a, b = [d for d in range(3) if d != axis]
            for side in (0, 1):
                p = np.zeros((len(u), 3))
                p[:, axis] = hi[axis] if side else lo[axis]
                p[:, a] = lo[a] + u * box
                p[:, b] = lo[b] + v * box
                nrm = np.zeros((len(u), 3))
                nrm[:, axis] = 1.0 if side else -1.0
                if axis == 1 and side == 0:
                    continue
                faces.append((p, nrm))
        bp = np.concatenate([f[0] for f in faces])
        bn = np.concatenate([f[1] for f in faces])
        bc = np.tile([0.7, 0.3, 0.25], (len(bp), 1)) + rng.uniform(-0.03, 0.03, (len(bp), 3))
        parts.append(_surface_splats(bp, bn, bc, 0.6 * spacing))
    splats = Splats(
        np.concatenate([s.positions for s in parts]), np.concatenate([s.rotations for s in parts]),
        np.concatenate([s.scales for s in parts]), np.concatenate([s.opacities for s in parts]),
        sh=np.concatenate([s.sh for s in parts]),
    )
    return GaussianScene(splats, 0), merge_meshes(meshes)


def write_demo(directory: str | Path, effect: str = "snowfall", frames: int = 250, box: float | None = 0.5,
               views: int = 2, width: int = 640, height: int = 480) -> Path:
    """Write scene.ply, mesh.obj, cameras.json and run.yaml into ``directory``; returns the config path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    scene, mesh = ground_scene(box=box)
    save_gaussian_ply(scene, d / "scene.ply")
    save_mesh_obj(mesh, d / "mesh.obj")
    cams = []
    for i in range(views):
        az = 2 * np.pi * i / max(views, 1) + 0.6
        eye = (2.6 * np.sin(az), 1.4, 2.6 * np.cos(az))
        cams.append(look_at(eye, (0.0, 0.2, 0.0), width, height, 50.0))
    save_cameras(cams, d / "cameras.json")
    (d / "run.yaml").write_text(
        "version: 1\n"
        "scene: scene.ply\n"
        "mesh: mesh.obj\n"
        f"effect: {effect}\n"
        f"frames: {frames}\n"
        "seed: 0\n"
        "output: out\n"
        "cameras: cameras.json\n",
        encoding="utf-8",
    )
    return d / "run.yaml"
