"""Shared builders for the test suite."""
import numpy as np

from gsweather.gaussian_core import Splats
from gsweather.scene_io import CameraSpec


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def random_rotations(rng, n):
    from scipy.spatial.transform import Rotation

    return Rotation.random(n, random_state=rng).as_matrix()


def camera(width=64, height=64, fx=60.0, fy=None, rotation=None, translation=(0.0, 0.0, 0.0)):
    fy = fx if fy is None else fy
    rot = np.eye(3) if rotation is None else rotation
    return CameraSpec(width, height, fx, fy, width / 2.0, height / 2.0, rot, translation)


def random_flat_splats(rng, n, spread=0.6, depth=(2.0, 5.0), scale=(0.02, 0.25)):
    pos = np.stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                    rng.uniform(depth[0], depth[1], n)], axis=1)
    return Splats(pos, random_quats(rng, n), rng.uniform(scale[0], scale[1], (n, 3)), rng.uniform(0.05, 1.0, n),
                  colors=rng.uniform(0, 1, (n, 3)))



def uv_sphere(n_lat=20, n_lon=40, radius=1.0, center=(0.0, 0.0, 0.0), bump=0.0, rng=None):
    """Closed, outward-wound UV sphere with 2 * n_lon * (n_lat - 1) triangles; optional radial noise."""
    from gsweather.mesh_geometry import TriangleMesh

    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(T) * np.cos(P), np.cos(T), np.sin(T) * np.sin(P)], axis=-1).reshape(-1, 3)
    verts = np.concatenate([[[0, 1.0, 0]], ring, [[0, -1.0, 0]]])
    r = radius * (1 + bump * rng.uniform(-1, 1, len(verts))) if bump else radius
    verts = verts * np.reshape(r, (-1, 1)) + np.asarray(center)
    tris = []
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        tris.append([0, idx(0, j + 1), idx(0, j)])
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)
            tris += [[a, b, d], [a, d, c]]
    last = len(verts) - 1
    for j in range(n_lon):
        tris.append([last, idx(n_lat - 2, j), idx(n_lat - 2, j + 1)])
    return TriangleMesh(verts, np.array(tris))
