"""Gaussian kernel math: quaternions, covariances and spherical harmonics.

Quaternions are stored as ``(w, x, y, z)`` everywhere in the package.
Most functions accept either a single item or a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


class GeometryError(ValueError):
    """Raised when a rotation/quaternion argument violates its contract."""


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if degree < 0 or degree > 3 or sh_coeff_count(degree) != count:
        raise GeometryError(f"{count} SH coefficients per channel is not a valid degree 0..3 block")
    return degree


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise GeometryError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def matrix_from_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    _check_unit(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quaternion_from_matrix(r: np.ndarray) -> np.ndarray:
    """Convert proper rotation matrices to unit quaternions with ``w >= 0``.

    Uses Shepperd's branch selection on the largest diagonal term so the
    result is accurate for rotations near 180 degrees.
    """
    r = np.asarray(r, dtype=np.float64)
    det = np.linalg.det(r)
    if np.any(det <= 0):
        raise GeometryError("rotation matrix must have positive determinant")
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    m00, m11, m22 = flat[:, 0, 0], flat[:, 1, 1], flat[:, 2, 2]
    trace = m00 + m11 + m22
    choice = np.argmax(np.stack([trace, m00, m11, m22], axis=-1), axis=-1)

    i = choice == 0
    s = np.sqrt(1.0 + trace[i]) * 2
    out[i, 0] = 0.25 * s
    out[i, 1] = (flat[i, 2, 1] - flat[i, 1, 2]) / s
    out[i, 2] = (flat[i, 0, 2] - flat[i, 2, 0]) / s
    out[i, 3] = (flat[i, 1, 0] - flat[i, 0, 1]) / s

    i = choice == 1
    s = np.sqrt(1.0 + m00[i] - m11[i] - m22[i]) * 2
    out[i, 0] = (flat[i, 2, 1] - flat[i, 1, 2]) / s
    out[i, 1] = 0.25 * s
    out[i, 2] = (flat[i, 0, 1] + flat[i, 1, 0]) / s
    out[i, 3] = (flat[i, 0, 2] + flat[i, 2, 0]) / s

    i = choice == 2
    s = np.sqrt(1.0 + m11[i] - m00[i] - m22[i]) * 2
    out[i, 0] = (flat[i, 0, 2] - flat[i, 2, 0]) / s
    out[i, 1] = (flat[i, 0, 1] + flat[i, 1, 0]) / s
    out[i, 2] = 0.25 * s
    out[i, 3] = (flat[i, 1, 2] + flat[i, 2, 1]) / s

    i = choice == 3
    s = np.sqrt(1.0 + m22[i] - m00[i] - m11[i]) * 2
    out[i, 0] = (flat[i, 1, 0] - flat[i, 0, 1]) / s
    out[i, 1] = (flat[i, 0, 2] + flat[i, 2, 0]) / s
    out[i, 2] = (flat[i, 1, 2] + flat[i, 2, 1]) / s
    out[i, 3] = 0.25 * s

    out[out[:, 0] < 0] *= -1.0
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out.reshape(r.shape[:-2] + (4,))


def rotate_vectors(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", matrix_from_quaternion(q), v)


def _check_unit(q: np.ndarray) -> None:
    n = np.linalg.norm(q, axis=-1)
    if not np.all(np.abs(n - 1.0) <= UNIT_TOL):
        raise GeometryError(f"quaternion is not unit length (|q| deviates by {np.max(np.abs(n - 1.0)):.3g})")


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def covariance_from(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Return ``R diag(scale)^2 R^T`` for unit quaternion(s) ``rotation``."""
    r = matrix_from_quaternion(rotation)
    s = np.asarray(scale, dtype=np.float64)
    m = r * s[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values in the 3DGS ordering and sign convention, shape (..., K)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_coeff_count(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def evaluate_sh(sh: np.ndarray, view_direction: np.ndarray) -> np.ndarray:
    """Evaluate SH colour blocks ``(..., K, 3)`` along unit view directions ``(..., 3)``.

    Follows the 3DGS convention: basis contraction, +0.5 offset, clamp to [0, 1].
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = sh_degree_from_count(sh.shape[-2])
    basis = sh_basis(view_direction, degree)
    rgb = np.einsum("...k,...kc->...c", basis, sh) + 0.5
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# splat containers
# ---------------------------------------------------------------------------

@dataclass
class GaussianSplat:
    """One Gaussian kernel; colour is flat RGB or an SH block of shape (K, 3)."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        _check_unit(self.rotation)
        if np.any(self.scale <= 0):
            raise GeometryError("scale components must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise GeometryError("opacity must lie in [0, 1]")


@dataclass
class Splats:
    """Columnar batch of Gaussian splats.

    Exactly one of ``colors`` (N, 3) flat RGB or ``sh`` (N, K, 3) is set.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray | None = None
    sh: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.colors is None) == (self.sh is None):
            raise ValueError("exactly one of colors or sh must be given")
        n = len(self.positions)
        for name in ("rotations", "scales", "opacities"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length {len(getattr(self, name))} != {n}")
        appearance = self.colors if self.colors is not None else self.sh
        if len(appearance) != n:
            raise ValueError("appearance length mismatch")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianSplat:
        color = self.colors[i] if self.colors is not None else self.sh[i]
        return GaussianSplat(self.positions[i], self.rotations[i], self.scales[i], float(self.opacities[i]), color)

    @property
    def sh_degree(self) -> int | None:
        return None if self.sh is None else sh_degree_from_count(self.sh.shape[1])

    @classmethod
    def empty(cls) -> "Splats":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), colors=np.zeros((0, 3))
        )

    @classmethod
    def from_list(cls, splats: list[GaussianSplat]) -> "Splats":
        if not splats:
            return cls.empty()
        colors = np.stack([s.color for s in splats])
        flat = colors.ndim == 2
        return cls(
            np.stack([s.position for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.stack([s.scale for s in splats]),
            np.array([s.opacity for s in splats], dtype=np.float64),
            colors=colors if flat else None,
            sh=None if flat else colors,
        )

    def colors_for(self, camera_center: np.ndarray) -> np.ndarray:
        """Flat RGB per splat as seen from ``camera_center``."""
        if self.colors is not None:
            return np.asarray(self.colors, dtype=np.float64)
        dirs = self.positions - np.asarray(camera_center, dtype=np.float64)
        norm = np.linalg.norm(dirs, axis=-1, keepdims=True)
        dirs = dirs / np.where(norm > 0, norm, 1.0)
        return evaluate_sh(self.sh, dirs)

    def with_flat_colors(self, colors: np.ndarray) -> "Splats":
        return Splats(self.positions, self.rotations, self.scales, self.opacities, colors=colors)


def concat_flat(parts: list[Splats]) -> Splats:
    """Concatenate flat-coloured splat batches (SH batches must be evaluated first)."""
    parts = [p for p in parts if len(p)]
    if not parts:
        return Splats.empty()
    if any(p.colors is None for p in parts):
        raise ValueError("concat_flat needs flat-colour batches")
    return Splats(
        np.concatenate([p.positions for p in parts]),
        np.concatenate([p.rotations for p in parts]),
        np.concatenate([p.scales for p in parts]),
        np.concatenate([p.opacities for p in parts]),
        colors=np.concatenate([p.colors for p in parts]),
    )
