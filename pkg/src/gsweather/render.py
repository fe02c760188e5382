"""CPU tile rasterizer for Gaussian splats.

Pixel ``(u, v)`` has its centre at image coordinates ``(u, v)``; a camera-space
point ``(x, y, z)`` projects to ``(fx x / z + cx, fy y / z + cy)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from PIL import Image

from .gaussian_core import GaussianSplat, Splats, covariance_from
from .scene_io import CameraSpec

TILE = 16
LOW_PASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma) beyond which a splat contributes nothing
NEAR = 0.01


@dataclass
class Projected2DSplat:
    mean: np.ndarray
    conic: np.ndarray  # (a, b, c) of the symmetric inverse covariance [[a, b], [b, c]]
    cov: np.ndarray  # 2x2, low-pass filtered
    cov_raw: np.ndarray  # 2x2, before the low-pass term
    depth: float
    color: np.ndarray
    opacity: float
    radius: float


@dataclass
class ProjectedSplats:
    """Visible splats after projection; ``ids`` index the input batch."""

    ids: np.ndarray
    means: np.ndarray
    conics: np.ndarray
    covs: np.ndarray
    covs_raw: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Projected2DSplat:
        return Projected2DSplat(self.means[i], self.conics[i], self.covs[i], self.covs_raw[i], float(self.depths[i]),
                                self.colors[i], float(self.opacities[i]), float(self.radii[i]))


def project_splats(splats: Splats, camera: CameraSpec, colors: np.ndarray | None = None,
                   near: float = NEAR) -> ProjectedSplats:
    """EWA projection of a splat batch; drops splats behind ``near`` or entirely off-screen."""
    if colors is None:
        colors = splats.colors_for(camera.center)
    W = camera.rotation
    t = splats.positions @ W.T + camera.translation
    z = t[:, 2]
    keep = z > near
    ids = np.flatnonzero(keep)
    t = t[keep]
    z = z[keep]
    cov3 = covariance_from(splats.rotations[keep], splats.scales[keep])
    n = len(ids)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * t[:, 0] / z ** 2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * t[:, 1] / z ** 2
    M = J @ W
    raw = M @ cov3 @ np.swapaxes(M, 1, 2)
    raw = 0.5 * (raw + np.swapaxes(raw, 1, 2))
    cov = raw + LOW_PASS * np.eye(2)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.sqrt(CUTOFF * lam) + 1e-3
    mean = np.stack([camera.fx * t[:, 0] / z + camera.cx, camera.fy * t[:, 1] / z + camera.cy], axis=1)
    on = ((mean[:, 0] + radius >= -0.5) & (mean[:, 0] - radius <= camera.width - 0.5)
          & (mean[:, 1] + radius >= -0.5) & (mean[:, 1] - radius <= camera.height - 0.5) & (det > 0))
    return ProjectedSplats(ids[on], mean[on], conic[on], cov[on], raw[on], z[on],
                           np.asarray(colors, dtype=np.float64)[ids[on]], splats.opacities[ids[on]], radius[on])


def project_splat(splat: GaussianSplat, camera: CameraSpec) -> Projected2DSplat | None:
    """Project one splat; ``None`` when culled."""
    color = splat.color if splat.color.ndim == 1 else None
    batch = Splats(splat.position[None], splat.rotation[None], splat.scale[None], np.array([splat.opacity]),
                   colors=None if color is None else color[None], sh=None if color is not None else splat.color[None])
    p = project_splats(batch, camera)
    return p[0] if len(p) else None


def depth_order(depths: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Front-to-back order; equal depths fall back to the splat id."""
    return np.lexsort((ids, depths))


@nb.njit(cache=True)
def _bin(means, radii, width, height, tile):
    tw = (width + tile - 1) // tile
    th = (height + tile - 1) // tile
    n = means.shape[0]
    rect = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(tw * th + 1, dtype=np.int64)
    for s in range(n):
        x0 = max(0, int(np.floor((means[s, 0] - radii[s]) / tile)))
        x1 = min(tw - 1, int(np.floor((means[s, 0] + radii[s]) / tile)))
        y0 = max(0, int(np.floor((means[s, 1] - radii[s]) / tile)))
        y1 = min(th - 1, int(np.floor((means[s, 1] + radii[s]) / tile)))
        rect[s, 0] = x0
        rect[s, 1] = x1
        rect[s, 2] = y0
        rect[s, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tw + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for s in range(n):
        for ty in range(rect[s, 2], rect[s, 3] + 1):
            for tx in range(rect[s, 0], rect[s, 1] + 1):
                t = ty * tw + tx
                lists[fill[t]] = s
                fill[t] += 1
    return offsets, lists


@nb.njit(cache=True, inline="always", _nrt=False)
def _shade_tile(t, tw, tile, width, height, offsets, lists, means, conics, colors, opac, bg, out):
    ty = t // tw
    tx = t - ty * tw
    for v in range(ty * tile, min(height, (ty + 1) * tile)):
        for u in range(tx * tile, min(width, (tx + 1) * tile)):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for q in range(offsets[t], offsets[t + 1]):
                s = lists[q]
                dx = u - means[s, 0]
                dy = v - means[s, 1]
                m = conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy + conics[s, 2] * dy * dy
                if m > CUTOFF:
                    continue
                alpha = min(ALPHA_MAX, opac[s] * np.exp(-0.5 * m))
                if alpha < ALPHA_MIN:
                    continue
                w = T * alpha
                r += w * colors[s, 0]
                g += w * colors[s, 1]
                b += w * colors[s, 2]
                T *= 1.0 - alpha
                if T < T_MIN:
                    break
            out[v, u, 0] = r + T * bg[0]
            out[v, u, 1] = g + T * bg[1]
            out[v, u, 2] = b + T * bg[2]


@nb.njit(cache=True, _nrt=False)
def _shade_serial(tw, th, tile, width, height, offsets, lists, means, conics, colors, opac, bg, out):
    for t in range(tw * th):
        _shade_tile(t, tw, tile, width, height, offsets, lists, means, conics, colors, opac, bg, out)


@nb.njit(cache=True, parallel=True, _nrt=False)
def _shade_parallel(tw, th, tile, width, height, offsets, lists, means, conics, colors, opac, bg, out):
    for t in nb.prange(tw * th):
        _shade_tile(t, tw, tile, width, height, offsets, lists, means, conics, colors, opac, bg, out)


def rasterize(proj: ProjectedSplats, width: int, height: int, background=(0.0, 0.0, 0.0),
              parallel: bool = False) -> np.ndarray:
    order = depth_order(proj.depths, proj.ids)
    means = np.ascontiguousarray(proj.means[order])
    conics = np.ascontiguousarray(proj.conics[order])
    colors = np.ascontiguousarray(proj.colors[order])
    opac = np.ascontiguousarray(proj.opacities[order], dtype=np.float64)
    offsets, lists = _bin(means, np.ascontiguousarray(proj.radii[order]), width, height, TILE)
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    out = np.empty((height, width, 3))
    shade = _shade_parallel if parallel else _shade_serial
    shade(tw, th, TILE, width, height, offsets, lists, means, conics, colors, opac,
          np.asarray(background, dtype=np.float64), out)
    return out


def render(splats: Splats, camera: CameraSpec, background=(0.0, 0.0, 0.0), colors: np.ndarray | None = None,
           parallel: bool = False) -> np.ndarray:
    """Alpha-composite ``splats`` front to back; returns an (H, W, 3) float image.

    ``colors`` overrides the per-splat RGB (e.g. SH already evaluated and darkened).
    """
    proj = project_splats(splats, camera, colors)
    return rasterize(proj, camera.width, camera.height, background, parallel)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(image: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    try:
        Image.fromarray(to_bytes(image)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write PNG {path}: {exc}") from exc
