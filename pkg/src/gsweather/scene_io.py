"""Readers and writers for scenes, meshes, cameras, and the sim normalization."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from .gaussian_core import Splats, quat_normalize, sh_coeff_count
from .mesh_geometry import MeshError, TriangleMesh

GROUND_HEIGHT = 0.02
MARGIN = 0.0


class SceneFormatError(ValueError):
    """Malformed or unsupported input file."""


@dataclass
class GaussianScene:
    splats: Splats
    sh_degree: int

    def __post_init__(self) -> None:
        if len(self.splats) == 0:
            raise SceneFormatError("scene has no splats")
        if self.splats.sh is None or self.splats.sh.shape[1] != sh_coeff_count(self.sh_degree):
            raise SceneFormatError("SH coefficient count does not match sh_degree")

    def __len__(self) -> int:
        return len(self.splats)

    @property
    def source_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.splats.positions
        return p.min(axis=0), p.max(axis=0)


# ---------------------------------------------------------------------------
# Gaussian PLY
# ---------------------------------------------------------------------------

_REQUIRED = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
             "f_dc_0", "f_dc_1", "f_dc_2"]


def _read_ply(path: Path) -> PlyData:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        return PlyData.read(str(path))
    except PlyParseError as exc:
        raise SceneFormatError(f"{path}: malformed PLY: {exc}") from exc
    except (ValueError, IndexError, EOFError) as exc:
        raise SceneFormatError(f"{path}: malformed PLY: {exc}") from exc


def _column(vertex, name: str, path: Path) -> np.ndarray:
    values = np.asarray(vertex[name], dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad):
        raise SceneFormatError(f"{path}: non-finite value in property '{name}' at vertex {bad[0]}")
    return values


def load_gaussian_ply(path: str | Path, activated: bool = False) -> GaussianScene:
    """Load a 3DGS-layout binary PLY.

    With ``activated=False`` (trainer output) scales are exponentiated and
    opacities passed through the logistic function. Set ``activated=True`` for
    asset files that already store final scale/opacity values.
    """
    path = Path(path)
    ply = _read_ply(path)
    if "vertex" not in ply:
        raise SceneFormatError(f"{path}: no 'vertex' element")
    if ply.text:
        raise SceneFormatError(f"{path}: Gaussian PLY must be binary little-endian")
    vertex = ply["vertex"]
    names = [p.name for p in vertex.properties]
    for name in _REQUIRED:
        if name not in names:
            raise SceneFormatError(f"{path}: missing required property '{name}'")
    if vertex.count == 0:
        raise SceneFormatError(f"{path}: scene has no splats")

    pos = np.stack([_column(vertex, k, path) for k in "xyz"], axis=1)
    raw_scale = np.stack([_column(vertex, f"scale_{i}", path) for i in range(3)], axis=1)
    raw_opacity = _column(vertex, "opacity", path)
    rot = np.stack([_column(vertex, f"rot_{i}", path) for i in range(4)], axis=1)
    norms = np.linalg.norm(rot, axis=1)
    if np.any(norms == 0):
        raise SceneFormatError(f"{path}: zero quaternion at vertex {int(np.argmin(norms))}")
    dc = np.stack([_column(vertex, f"f_dc_{i}", path) for i in range(3)], axis=1)

    rest_names = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n[7:]))
    n_rest = len(rest_names)
    if n_rest % 3:
        raise SceneFormatError(f"{path}: f_rest count {n_rest} not divisible by 3")
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if sh_coeff_count(degree) != k or degree > 3:
        raise SceneFormatError(f"{path}: {k} SH coefficients per channel is not a valid degree")
    sh = np.empty((vertex.count, k, 3))
    sh[:, 0, :] = dc
    if n_rest:
        rest = np.stack([_column(vertex, n, path) for n in rest_names], axis=1)
        # stored channel-major: f_rest[c * (k - 1) + j]
        sh[:, 1:, :] = rest.reshape(-1, 3, k - 1).transpose(0, 2, 1)

    if activated:
        scales, opacities = raw_scale, raw_opacity
    else:
        scales = np.exp(raw_scale)
        opacities = 1.0 / (1.0 + np.exp(-raw_opacity))
    splats = Splats(pos, quat_normalize(rot), scales, opacities, sh=sh)
    return GaussianScene(splats, degree)


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def save_gaussian_ply(scene: GaussianScene, path: str | Path, activated: bool = False) -> None:
    s = scene.splats
    k = s.sh.shape[1]
    fields = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    fields += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    fields += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    data = np.zeros(len(s), dtype=[(f, "<f4") for f in fields])
    for i, c in enumerate("xyz"):
        data[c] = s.positions[:, i]
    for i in range(3):
        data[f"f_dc_{i}"] = s.sh[:, 0, i]
    rest = s.sh[:, 1:, :].transpose(0, 2, 1).reshape(len(s), -1)
    for i in range(rest.shape[1]):
        data[f"f_rest_{i}"] = rest[:, i]
    data["opacity"] = s.opacities if activated else _logit(s.opacities)
    scales = s.scales if activated else np.log(s.scales)
    for i in range(3):
        data[f"scale_{i}"] = scales[:, i]
        data[f"rot_{i}"] = s.rotations[:, i]
    data["rot_3"] = s.rotations[:, 3]
    try:
        PlyData([PlyElement.describe(data, "vertex")], byte_order="<").write(str(path))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def load_mesh(path: str | Path) -> TriangleMesh:
    """Load an OBJ or PLY triangle mesh; degenerate triangles are dropped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, tris, normals = _parse_obj(path)
    elif suffix == ".ply":
        verts, tris, normals = _parse_mesh_ply(path)
    else:
        raise SceneFormatError(f"{path}: unsupported mesh format '{suffix}' (use .obj or .ply)")
    if len(tris) == 0:
        raise SceneFormatError(f"{path}: mesh has no faces")
    try:
        mesh = TriangleMesh(verts, tris, normals).drop_degenerate()
    except MeshError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc
    if len(mesh) == 0:
        raise SceneFormatError(f"{path}: every triangle is degenerate")
    return mesh


def _parse_obj(path: Path):
    verts: list[list[float]] = []
    normals: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise SceneFormatError(
                            f"{path}:{lineno}: face with {len(parts) - 1} vertices; "
                            "triangulate the mesh before loading"
                        )
                    idx = []
                    for token in parts[1:]:
                        i = int(token.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    faces.append(idx)
            except SceneFormatError:
                raise
            except (ValueError, IndexError) as exc:
                raise SceneFormatError(f"{path}:{lineno}: cannot parse '{line.strip()}'") from exc
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(v)):
        raise SceneFormatError(f"{path}: non-finite vertex coordinate")
    n = np.array(normals, dtype=np.float64).reshape(-1, 3) if len(normals) == len(verts) and normals else None
    return v, np.array(faces, dtype=np.int64).reshape(-1, 3), n


def _parse_mesh_ply(path: Path):
    ply = _read_ply(path)
    if "vertex" not in ply or "face" not in ply:
        raise SceneFormatError(f"{path}: mesh PLY needs 'vertex' and 'face' elements")
    vertex = ply["vertex"]
    v = np.stack([_column(vertex, k, path) for k in "xyz"], axis=1)
    names = [p.name for p in vertex.properties]
    n = None
    if all(k in names for k in ("nx", "ny", "nz")):
        n = np.stack([_column(vertex, k, path) for k in ("nx", "ny", "nz")], axis=1)
    face = ply["face"]
    key = next((p.name for p in face.properties if p.name in ("vertex_indices", "vertex_index")), None)
    if key is None:
        raise SceneFormatError(f"{path}: face element lacks vertex_indices")
    lists = face[key]
    if len(lists) == 0:
        return v, np.zeros((0, 3), dtype=np.int64), n
    sizes = np.array([len(f) for f in lists])
    if np.any(sizes != 3):
        bad = int(np.flatnonzero(sizes != 3)[0])
        raise SceneFormatError(
            f"{path}: face {bad} has {sizes[bad]} vertices; triangulate the mesh before loading"
        )
    return v, np.stack(lists).astype(np.int64), n


def save_mesh_obj(mesh: TriangleMesh, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*(float(c) for c in v)))
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class CameraSpec:
    """Pinhole camera with OpenCV axes (x right, y down, z forward).

    ``rotation``/``translation`` map world points into the camera frame.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width/height must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) <= 0:
            raise ValueError("camera rotation must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]),
                   float(d["cy"]), d["rotation"], d["translation"])


def look_at(eye, target, width: int, height: int, fov_y_deg: float = 50.0, up=(0.0, 1.0, 0.0)) -> CameraSpec:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 0.0, 1.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2)
    return CameraSpec(width, height, f, f, width / 2.0, height / 2.0, rot, -rot @ eye)


def orbit_cameras(center, radius: float, elevation_deg: float, count: int, width: int, height: int,
                  fov_y_deg: float = 50.0) -> list[CameraSpec]:
    center = np.asarray(center, dtype=np.float64)
    elev = np.radians(elevation_deg)
    cams = []
    for i in range(count):
        az = 2 * np.pi * i / count
        offset = radius * np.array([np.cos(elev) * np.sin(az), np.sin(elev), np.cos(elev) * np.cos(az)])
        cams.append(look_at(center + offset, center, width, height, fov_y_deg))
    return cams


def load_cameras(path: str | Path) -> list[CameraSpec]:
    """Read a camera JSON file: a list of records or ``{"cameras": [...]}``."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid camera JSON: {exc}") from exc
    records = payload["cameras"] if isinstance(payload, dict) else payload
    try:
        return [CameraSpec.from_dict(r) for r in records]
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: bad camera record: {exc}") from exc


def save_cameras(cameras: list[CameraSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# normalization into the unit simulation cube
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimTransform:
    """``sim = scale * world + translation``."""

    scale: float
    translation: tuple[float, float, float]
    ground_height: float = GROUND_HEIGHT

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError("SimTransform scale must be positive")

    def to_sim(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.translation)

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.translation)) / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation), "ground_height": self.ground_height}

    @classmethod
    def identity(cls) -> "SimTransform":
        return cls(1.0, (0.0, 0.0, 0.0))


def normalization_for_bounds(lo: np.ndarray, hi: np.ndarray, margin: float = MARGIN,
                             ground: float = GROUND_HEIGHT) -> SimTransform:
    """Uniform scale + translation fitting ``[lo, hi]`` into the unit cube.

    x and z may span ``[margin, 1 - margin]`` and are centred; y may span
    ``[ground, 1 - margin]`` and its lowest point lands on ``ground``. The
    scale is the largest one for which every axis fits.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    extent = hi - lo
    if not np.all(np.isfinite(extent)) or np.max(extent) <= 0:
        raise ValueError("cannot normalize zero-extent bounds")
    room = np.array([1.0 - 2.0 * margin, 1.0 - margin - ground, 1.0 - 2.0 * margin])
    if np.any(room <= 0):
        raise ValueError("margin and ground height leave no room inside the unit cube")
    flat = extent <= 0
    scale = float(np.min(room[~flat] / extent[~flat]))
    center = 0.5 * (lo + hi)
    t = 0.5 - scale * center
    t[1] = ground - scale * lo[1]
    return SimTransform(scale, tuple(float(x) for x in t), ground)


def compute_normalization(scene: GaussianScene, mesh: TriangleMesh) -> SimTransform:
    if len(scene) == 0 or len(mesh) == 0:
        raise ValueError("scene and mesh must be non-empty")
    slo, shi = scene.source_bounds
    mlo, mhi = mesh.bounds
    return normalization_for_bounds(np.minimum(slo, mlo), np.maximum(shi, mhi))
