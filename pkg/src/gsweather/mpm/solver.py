"""Frame stepping, active-particle tracking and the high-level simulator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..gaussian_core import GeometryError, quaternion_from_matrix
from . import kernels
from .particles import (
    CollisionEvents,
    EmitterSpec,
    KeyframeTrack,
    Material,
    MaterialTable,
    ParticleState,
    SimConfig,
    emit,
    keyframed_position,
)


class SimulationError(RuntimeError):
    def __init__(self, message: str, frame: int | None = None, particle_id: int | None = None):
        super().__init__(message)
        self.frame = frame
        self.particle_id = particle_id


# ---------------------------------------------------------------------------
# rotation extraction
# ---------------------------------------------------------------------------

def rotation_matrix_from_deformation(F: np.ndarray, transposed: bool = False) -> np.ndarray:
    """Rotation factor of ``F = U S V^T``.

    Default returns the polar rotation ``U V^T``; ``transposed`` returns
    ``V U^T`` (its inverse). A reflection is removed by negating the last
    singular direction.
    """
    F = np.asarray(F, dtype=np.float64)
    U, S, Vt = np.linalg.svd(F)
    if np.any(S[..., -1] <= 1e-12 * np.maximum(S[..., 0], 1e-300)):
        raise GeometryError("deformation gradient is singular")
    flip = np.linalg.det(U @ Vt) < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, -1] *= -1.0
    if transposed:
        return np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)
    return U @ Vt


def rotation_from_deformation(F: np.ndarray, transposed: bool = False) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of the rotation factor of ``F``."""
    return quaternion_from_matrix(rotation_matrix_from_deformation(F, transposed))


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

P2GHook = Callable[[np.ndarray, np.ndarray, float, np.ndarray], None]


@dataclass
class MpmState:
    """Everything a frame step reads and writes.

    ``particles`` holds dynamic particles; ``stationary`` holds the static
    scene, whose mass is baked once into ``stationary_mass``.
    """

    particles: ParticleState
    materials: MaterialTable
    stationary: ParticleState = field(default_factory=lambda: ParticleState(0))
    track: KeyframeTrack | None = None
    frame: int = 0
    p2g_hook: P2GHook | None = None
    stationary_mass: np.ndarray | None = None
    stationary_total: float = 0.0
    _grid_m: np.ndarray | None = None
    _grid_v: np.ndarray | None = None
    _chunks: tuple[np.ndarray, np.ndarray] | None = None
    _scratch: tuple[np.ndarray, np.ndarray] = field(default_factory=kernels.make_scratch)

    def ensure_grid(self, config: SimConfig) -> None:
        n = config.grid_res
        if self._grid_m is None or self._grid_m.shape[0] != n:
            self._grid_m = np.zeros((n, n, n))
            self._grid_v = np.zeros((n, n, n, 3))
        if self.stationary_mass is None or self.stationary_mass.shape[0] != n:
            self.stationary_mass = np.zeros((n, n, n))
            pos = self.stationary.x
            if len(pos):
                keep = stencil_valid(pos, config)
                kernels.deposit_mass(np.ascontiguousarray(pos[keep]), config.particle_mass, float(n),
                                     self.stationary_mass, *self._scratch)
                self.stationary_total = float(np.count_nonzero(keep)) * config.particle_mass
        if config.parallel and self._chunks is None:
            c = kernels.PARALLEL_CHUNKS
            self._chunks = (np.zeros((c, n, n, n)), np.zeros((c, n, n, n, 3)))

    @property
    def grid_mass(self) -> np.ndarray:
        return self._grid_m

    @property
    def grid_velocity(self) -> np.ndarray:
        return self._grid_v


def stencil_valid(x: np.ndarray, config: SimConfig) -> np.ndarray:
    g = x * config.grid_res - 0.5
    return np.all((g >= 0) & (g < config.grid_res - 2), axis=-1)


def gaussians_to_stationary_particles(scene, transform) -> ParticleState:
    """One motionless ``STATIONARY`` particle per Gaussian centre, in sim units."""
    sim = transform.to_sim(scene.splats.positions)
    ps = ParticleState(max(len(sim), 1))
    ps.append(sim, np.zeros_like(sim), Material.STATIONARY, spawn_frame=0)
    return ps


def _active_dynamic(ps: ParticleState) -> tuple[np.ndarray, np.ndarray]:
    act = ps.active & (ps.material != Material.STATIONARY)
    all_idx = np.flatnonzero(act)
    rigid = ps.material[all_idx] == Material.RIGID
    return all_idx, all_idx[~rigid]


def substep(state: MpmState, config: SimConfig, p2g_idx: np.ndarray, g2p_idx: np.ndarray) -> None:
    ps = state.particles
    n = config.grid_res
    inv_dx = float(n)
    gm, gv = state._grid_m, state._grid_v
    gm[:] = state.stationary_mass
    gv[:] = 0.0
    args = (ps.raw("x"), ps.raw("v"), ps.raw("C"), ps.raw("F"), ps.raw("R"), ps.raw("Jp"), ps.raw("material"),
            state.materials.params, config.dt)
    if state.p2g_hook is not None:
        mass_before = state.stationary_total + len(p2g_idx) * config.particle_mass
        mom_before = config.particle_mass * ps.v[p2g_idx].sum(axis=0)
    if config.parallel:
        kernels.p2g_parallel(p2g_idx, *args, config.particle_mass, config.particle_volume, inv_dx, gm, gv,
                             *state._scratch, *state._chunks)
    else:
        kernels.p2g_serial(p2g_idx, *args, config.particle_mass, config.particle_volume, inv_dx, gm, gv,
                           *state._scratch)
    if state.p2g_hook is not None:
        state.p2g_hook(gm, gv, mass_before, mom_before)
    gdt = np.asarray(config.gravity, dtype=np.float64) * config.dt
    update = kernels.grid_update_parallel if config.parallel else kernels.grid_update_serial
    update(gm, gv, state.stationary_mass, gdt, config.stationary_zero_fraction, config.boundary_cells)
    lo, hi = config.clamp_bounds
    vmax = config.velocity_clamp_cells * config.dx / config.dt
    gather = kernels.g2p_parallel if config.parallel else kernels.g2p_serial
    gather(g2p_idx, *args[:6], ps.raw("Vsvd"), *args[6:], inv_dx, gv, vmax, lo, hi, *state._scratch)


def _check_finite(state: MpmState, idx: np.ndarray) -> None:
    ps = state.particles
    if np.isfinite(ps.x).all() and np.isfinite(ps.v).all():
        return
    bad = ~(np.all(np.isfinite(ps.x[idx]), axis=1) & np.all(np.isfinite(ps.v[idx]), axis=1))
    pid = int(ps.pid[idx[np.argmax(bad)]])
    raise SimulationError(f"non-finite state at frame {state.frame}, particle {pid}", state.frame, pid)


def step(state: MpmState, config: SimConfig) -> MpmState:
    """Advance one output frame (``config.substeps`` substeps). Mutates and returns ``state``."""
    ps = state.particles
    state.ensure_grid(config)
    p2g_idx, g2p_idx = _active_dynamic(ps)
    ps.prev_x[:] = ps.x
    if len(p2g_idx) == 0:
        state.frame += 1
        return state
    rigid_idx = np.setdiff1d(p2g_idx, g2p_idx)
    lo, hi = config.clamp_bounds
    _check_finite(state, p2g_idx)
    for s in range(config.substeps):
        substep(state, config, p2g_idx, g2p_idx)
        if len(rigid_idx) and state.track is not None:
            pos, vel = keyframed_position(state.track, state.frame + (s + 1) / config.substeps)
            ps.x[rigid_idx] = np.clip(pos, lo, hi)
            ps.v[rigid_idx] = vel / config.frame_dt
        _check_finite(state, p2g_idx)
    state.frame += 1
    return state


@dataclass
class ActiveUpdate:
    events: CollisionEvents
    exited: int


def update_active_flags(state: MpmState, config: SimConfig, transposed_rotation: bool = False) -> ActiveUpdate:
    """Deactivate particles that barely moved this frame or left the domain.

    Particles stopped inside the domain produce a collision event carrying
    their final position and rotation; particles leaving the domain do not.
    ``state.frame`` is the index of the next frame, so events are stamped with
    ``state.frame - 1``.
    """
    ps = state.particles
    idx = np.flatnonzero(ps.active & (ps.material != Material.STATIONARY))
    if len(idx) == 0:
        return ActiveUpdate(CollisionEvents.empty(), 0)
    frame = state.frame - 1
    x = ps.x[idx]
    moved = np.linalg.norm(x - ps.prev_x[idx], axis=1)
    outside = ~config.in_domain(x)
    mat = ps.material[idx]
    young = np.isin(mat, (Material.SNOW, Material.SAND)) & (frame - ps.spawn_frame[idx] < config.spawn_grace_frames)
    resting = (moved < config.delta) & ~young & ~outside
    ps.active[idx[outside | resting]] = False
    hit = idx[resting]
    if len(hit):
        rot = rotation_from_deformation(ps.F[hit], transposed_rotation)
    else:
        rot = np.zeros((0, 4))
    events = CollisionEvents(ps.pid[hit].copy(), np.full(len(hit), frame, dtype=np.int64), ps.x[hit].copy(), rot)
    return ActiveUpdate(events, int(np.count_nonzero(outside)))


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------

@dataclass
class FrameResult:
    frame: int
    emitted: int
    events: CollisionEvents
    exited: int
    active: int


class Simulator:
    """Emit, step and track activity frame by frame with a single seeded RNG."""

    def __init__(
        self,
        config: SimConfig,
        materials: MaterialTable,
        emitters: list[EmitterSpec],
        stationary: ParticleState | None = None,
        track: KeyframeTrack | None = None,
        transposed_rotation: bool = False,
    ):
        for e in emitters:
            e.validate()
        self.config = config
        self.emitters = emitters
        self.rng = np.random.default_rng(config.seed)
        self.transposed_rotation = transposed_rotation
        self.state = MpmState(
            ParticleState(),
            materials,
            stationary if stationary is not None else ParticleState(0),
            track=track,
        )
        self.state.ensure_grid(config)
        self.totals = {"emitted": 0, "collided": 0, "exited": 0}

    @property
    def particles(self) -> ParticleState:
        return self.state.particles

    @property
    def frame(self) -> int:
        return self.state.frame

    def advance(self) -> FrameResult:
        frame = self.state.frame
        emitted = 0
        for spec in self.emitters:
            batch = emit(spec, frame, self.rng)
            if len(batch) == 0:
                continue
            pos = batch.positions
            if batch.material == Material.RIGID and self.state.track is not None:
                start, _ = keyframed_position(self.state.track, frame)
                pos = np.repeat(start[None], len(batch), axis=0)
            self.state.particles.append(pos, batch.velocities, int(batch.material), frame, batch.appearance_u)
            emitted += len(batch)
        step(self.state, self.config)
        upd = update_active_flags(self.state, self.config, self.transposed_rotation)
        self.totals["emitted"] += emitted
        self.totals["collided"] += len(upd.events)
        self.totals["exited"] += upd.exited
        active = int(np.count_nonzero(self.state.particles.active))
        return FrameResult(frame, emitted, upd.events, upd.exited, active)
