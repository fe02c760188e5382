"""Collision resolution for particles that came to rest against the scene.

Snow and sand rest positions are projected onto the mesh; rain feeds a
volumetric wetness field that darkens the static scene.
Everything here works in simulation units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .effects import CollisionMode, EffectPreset, dynamic_scales
from .gaussian_core import Splats, quaternion_from_matrix
from .mesh_geometry import BVH, SurfaceHits
from .mpm.particles import CollisionEvents

KERNEL_SIGMA = 1.5
KERNEL_RADIUS = 3


@dataclass
class AccumulatedSplats:
    """Frozen rest-state splats with the frame they appeared and the particle that produced them."""

    splats: Splats
    birth_frames: np.ndarray
    event_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.splats)

    @classmethod
    def empty(cls) -> "AccumulatedSplats":
        return cls(Splats.empty(), np.zeros(0, np.int64), np.zeros(0, np.int64))


def tangent_frame(normals: np.ndarray) -> np.ndarray:
    """Rotation matrices whose local y axis is the given unit normal, shape (N, 3, 3)."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    helper = np.where(np.abs(n[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(t1, n)
    return np.stack([t1, n, t2], axis=-1)


def _hits(events: CollisionEvents, bvh: BVH) -> SurfaceHits:
    return bvh.query(events.positions)


def project_snow(events: CollisionEvents, bvh: BVH, p: EffectPreset) -> Splats:
    """Rest splats moved to ``closest point + offset * normal``, y axis along the normal."""
    n = len(events)
    hits = _hits(events, bvh)
    pos = hits.points + p.surface_offset * hits.normals
    rot = quaternion_from_matrix(tangent_frame(hits.normals)) if n else np.zeros((0, 4))
    s = p.accumulated_scale[0]
    colors = np.broadcast_to(np.asarray(p.render_color, dtype=np.float64), (n, 3)).copy()
    return Splats(pos, rot, np.full((n, 3), s), np.full(n, p.render_opacity), colors=colors)


def event_uniforms(event_ids: np.ndarray, seed: int, stream: int) -> np.ndarray:
    """One uniform draw per event, depending only on (seed, stream, particle id)."""
    return np.array([np.random.default_rng([seed, stream, int(i)]).random() for i in event_ids])


def project_sand(events: CollisionEvents, bvh: BVH, p: EffectPreset, seed: int = 0) -> Splats:
    """Thin, surface-aligned sand: tangent scale drawn from the accumulated range, normal axis flattened."""
    n = len(events)
    hits = _hits(events, bvh)
    pos = hits.points + p.surface_offset * hits.normals
    rot = quaternion_from_matrix(tangent_frame(hits.normals)) if n else np.zeros((0, 4))
    lo, hi = p.accumulated_scale
    t = lo + (hi - lo) * event_uniforms(events.particle_ids, seed, 0x5A4D)
    scales = np.stack([t, p.normal_flatten * t, t], axis=1) if n else np.zeros((0, 3))
    colors = np.broadcast_to(np.asarray(p.render_color, dtype=np.float64), (n, 3)).copy()
    return Splats(pos, rot, scales, np.full(n, p.render_opacity), colors=colors)


def unresolved(events: CollisionEvents, p: EffectPreset, appearance_u: np.ndarray) -> Splats:
    """Rest splats left where the particles stopped, with their dynamic appearance."""
    n = len(events)
    colors = np.broadcast_to(np.asarray(p.render_color, dtype=np.float64), (n, 3)).copy()
    rot = events.rotations if p.rotate else np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Splats(events.positions.copy(), rot.copy(), dynamic_scales(p, appearance_u), np.full(n, p.render_opacity),
                  colors=colors)


def resolve_events(events: CollisionEvents, p: EffectPreset, bvh: BVH | None, appearance_u: np.ndarray,
                   seed: int = 0, enabled: bool = True) -> Splats:
    """Simulation-space rest splats for a batch of events (empty for wetness-only effects)."""
    if len(events) == 0:
        return Splats.empty()
    mode = p.collision_mode
    if not enabled or mode == CollisionMode.NONE or bvh is None:
        if mode == CollisionMode.WETNESS_GRID and enabled:
            return Splats.empty()
        return unresolved(events, p, appearance_u)
    if mode == CollisionMode.SURFACE_PROJECT:
        return project_snow(events, bvh, p)
    if mode == CollisionMode.SAND_ACCUMULATE:
        return project_sand(events, bvh, p, seed)
    return Splats.empty()


# ---------------------------------------------------------------------------
# wetness
# ---------------------------------------------------------------------------

def _kernel() -> np.ndarray:
    r = np.arange(-KERNEL_RADIUS, KERNEL_RADIUS + 1, dtype=np.float64)
    g = np.exp(-0.5 * (r / KERNEL_SIGMA) ** 2)
    return g[:, None, None] * g[None, :, None] * g[None, None, :]


class WetnessGrid:
    """Cubic ``res``³ wetness field over a padded box around the mesh.

    Cell ``(i, j, k)`` covers ``origin + [i, i+1) * cell``; samples are taken
    at cell centres.
    """

    def __init__(self, origin, cell: float, res: int = 64, decay: float = 0.95, values: np.ndarray | None = None):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if not cell > 0:
            raise ValueError("cell size must be positive")
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.cell = float(cell)
        self.res = int(res)
        self.decay = float(decay)
        self.values = np.zeros((res, res, res)) if values is None else np.asarray(values, dtype=np.float64)
        if self.values.shape != (res, res, res):
            raise ValueError("wetness values have the wrong shape")

    @classmethod
    def around(cls, lo, hi, res: int = 64, decay: float = 0.95, pad_cells: int = KERNEL_RADIUS) -> "WetnessGrid":
        """Cube covering ``[lo, hi]`` with ``pad_cells`` of padding on every side."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        extent = max(float(np.max(hi - lo)), 1e-6)
        cell = extent / (res - 2 * pad_cells)
        center = 0.5 * (lo + hi)
        return cls(center - 0.5 * res * cell, cell, res, decay)

    def copy(self) -> "WetnessGrid":
        return WetnessGrid(self.origin, self.cell, self.res, self.decay, self.values.copy())

    def cell_of(self, point) -> np.ndarray:
        return np.floor((np.asarray(point, dtype=np.float64) - self.origin) / self.cell).astype(np.int64)

    def cell_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell

    def total(self) -> float:
        return float(self.values.sum())


_KERNEL = _kernel()


def splat_wetness(grid: WetnessGrid, impact) -> bool:
    """Add one unit of wetness around ``impact`` (in place). Returns False when the impact is outside.

    The Gaussian kernel is renormalized over the cells that fall inside the
    grid, so each impact adds exactly 1.
    """
    c = grid.cell_of(impact)
    if np.any(c < 0) or np.any(c >= grid.res):
        return False
    r = KERNEL_RADIUS
    lo = np.maximum(c - r, 0)
    hi = np.minimum(c + r + 1, grid.res)
    k = _KERNEL[lo[0] - c[0] + r:hi[0] - c[0] + r, lo[1] - c[1] + r:hi[1] - c[1] + r,
                lo[2] - c[2] + r:hi[2] - c[2] + r]
    grid.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += k / k.sum()
    return True


def decay_wetness(grid: WetnessGrid) -> WetnessGrid:
    grid.values *= grid.decay
    return grid


def sample_wetness(grid: WetnessGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation between cell centres; zero outside the grid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = (pts - grid.origin) / grid.cell - 0.5
    inside = np.all((g >= -0.5) & (g <= grid.res - 0.5), axis=1)
    g = np.clip(g, 0.0, grid.res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), grid.res - 2)
    f = g - i0
    v = grid.values
    out = np.zeros(len(pts))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return np.where(inside, out, 0.0)


def wetness_factors(grid: WetnessGrid | None, points: np.ndarray, gain: float = 0.4) -> np.ndarray:
    """Per-point colour multiplier ``1 / (1 + gain * w)``."""
    if grid is None:
        return np.ones(len(points))
    return 1.0 / (1.0 + gain * sample_wetness(grid, points))


def apply_wetness_to_scene(colors: np.ndarray, sim_positions: np.ndarray, grid: WetnessGrid | None,
                           gain: float = 0.4) -> np.ndarray:
    """Darkened copy of ``colors`` (N, 3); the input array is left untouched."""
    colors = np.asarray(colors, dtype=np.float64)
    if grid is None or not np.any(grid.values):
        return colors.copy()
    return colors * wetness_factors(grid, sim_positions, gain)[:, None]


def wet_from_events(grid: WetnessGrid, events: CollisionEvents, bvh: BVH | None) -> int:
    """Splat one impact per event at its closest mesh point; returns the number that landed in the grid."""
    if len(events) == 0:
        return 0
    pts = events.positions if bvh is None else bvh.query(events.positions).points
    return sum(splat_wetness(grid, q) for q in pts)
