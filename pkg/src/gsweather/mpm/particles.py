"""Particle storage, emitters, configuration and keyframe tracks."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels


class Material(enum.IntEnum):
    STATIONARY = kernels.STATIONARY
    SNOW = kernels.SNOW
    FLUID = kernels.FLUID
    SAND = kernels.SAND
    RIGID = kernels.RIGID


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    gravity: tuple[float, float, float] = (0.0, -9.8, 0.0)
    substeps: int = 25
    dt: float = 2e-4
    delta: float = 1e-3
    domain_margin: float = 0.05
    seed: int = 0
    frames: int = 250
    grid_res: int = 64
    boundary_cells: int = 2
    particle_mass: float = 1.0
    particle_volume: float = (1.0 / 64) ** 3 / 4
    stationary_zero_fraction: float = 0.9
    velocity_clamp_cells: float = 2.0
    spawn_grace_frames: int = 10
    parallel: bool = False

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_res

    @property
    def frame_dt(self) -> float:
        return self.substeps * self.dt

    @property
    def clamp_bounds(self) -> tuple[float, float]:
        """Positions are kept here so every B-spline stencil stays on the grid."""
        lo = self.boundary_cells * self.dx
        return lo, 1.0 - lo

    def in_domain(self, x: np.ndarray) -> np.ndarray:
        m = self.domain_margin
        return np.all((x >= -m) & (x <= 1.0 + m), axis=-1)


@dataclass
class MaterialTable:
    """Per-material constitutive constants indexed by ``Material``."""

    params: np.ndarray

    @classmethod
    def from_youngs(cls, youngs: float, poisson: float) -> "MaterialTable":
        mu, lam = lame_parameters(youngs, poisson)
        p = np.zeros((len(Material), 5))
        p[:, kernels.CLAMP_LO] = 0.0
        p[:, kernels.CLAMP_HI] = np.inf
        p[Material.SNOW] = (mu, lam, 10.0, 1 - 2.5e-2, 1 + 4.5e-3)
        p[Material.FLUID] = (0.0, lam, 0.0, 0.0, np.inf)
        p[Material.SAND] = (mu, lam, 0.0, 0.9, 1.02)
        return cls(p)


def lame_parameters(youngs: float, poisson: float) -> tuple[float, float]:
    mu = youngs / (2 * (1 + poisson))
    lam = youngs * poisson / ((1 + poisson) * (1 - 2 * poisson))
    return mu, lam


# ---------------------------------------------------------------------------
# particle storage
# ---------------------------------------------------------------------------

class ParticleState:
    """Growable struct-of-arrays particle store. Properties return live views."""

    _FIELDS = {
        "x": ((3,), np.float64),
        "prev_x": ((3,), np.float64),
        "v": ((3,), np.float64),
        "C": ((3, 3), np.float64),
        "F": ((3, 3), np.float64),
        "R": ((3, 3), np.float64),
        "Vsvd": ((3, 3), np.float64),  # right singular vectors of F, reused to seed the next decomposition
        "Jp": ((), np.float64),
        "material": ((), np.int64),
        "active": ((), np.bool_),
        "pid": ((), np.int64),
        "spawn_frame": ((), np.int64),
        "appearance_u": ((), np.float64),
    }

    def __init__(self, capacity: int = 1024):
        self.n = 0
        self._data = {k: np.zeros((capacity,) + shape, dtype=dt) for k, (shape, dt) in self._FIELDS.items()}

    def __len__(self) -> int:
        return self.n

    def __getattr__(self, name: str) -> np.ndarray:
        data = self.__dict__.get("_data")
        if data is not None and name in data:
            return data[name][: self.n]
        raise AttributeError(name)

    def _reserve(self, extra: int) -> None:
        cap = len(self._data["x"])
        if self.n + extra <= cap:
            return
        new_cap = max(cap * 2, self.n + extra)
        for k, arr in self._data.items():
            grown = np.zeros((new_cap,) + arr.shape[1:], dtype=arr.dtype)
            grown[: self.n] = arr[: self.n]
            self._data[k] = grown

    def append(self, x: np.ndarray, v: np.ndarray, material: int | np.ndarray, spawn_frame: int,
               appearance_u: np.ndarray | None = None) -> np.ndarray:
        """Add particles at rest state (F = I, C = 0); returns their indices."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        m = len(x)
        self._reserve(m)
        s = slice(self.n, self.n + m)
        d = self._data
        d["x"][s] = x
        d["prev_x"][s] = x
        d["v"][s] = np.asarray(v, dtype=np.float64).reshape(-1, 3)
        d["C"][s] = 0.0
        d["F"][s] = np.eye(3)
        d["R"][s] = np.eye(3)
        d["Vsvd"][s] = np.eye(3)
        d["Jp"][s] = 1.0
        d["material"][s] = material
        d["active"][s] = True
        d["pid"][s] = np.arange(self.n, self.n + m)
        d["spawn_frame"][s] = spawn_frame
        d["appearance_u"][s] = 0.5 if appearance_u is None else appearance_u
        self.n += m
        return np.arange(s.start, s.stop)

    def raw(self, name: str) -> np.ndarray:
        """Full backing array (length >= n) for kernels that index by particle id."""
        return self._data[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v[: self.n].copy() for k, v in self._data.items()}


@dataclass
class CollisionEvent:
    particle_id: int
    frame: int
    position: np.ndarray
    rotation: np.ndarray


@dataclass
class CollisionEvents:
    """Columnar batch of collision events (positions in sim units)."""

    particle_ids: np.ndarray
    frames: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray

    def __len__(self) -> int:
        return len(self.particle_ids)

    def __getitem__(self, i: int) -> CollisionEvent:
        return CollisionEvent(int(self.particle_ids[i]), int(self.frames[i]), self.positions[i], self.rotations[i])

    @classmethod
    def empty(cls) -> "CollisionEvents":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 4)))

    @classmethod
    def concat(cls, parts: list["CollisionEvents"]) -> "CollisionEvents":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("particle_ids", "frames", "positions", "rotations")))


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------

@dataclass
class EmitterSpec:
    """Uniform emission inside an axis-aligned box (a plane patch when one extent is 0)."""

    region_min: tuple[float, float, float]
    region_max: tuple[float, float, float]
    count: int
    period: int
    velocity: tuple[float, float, float]
    jitter: tuple[float, float, float]
    material: Material
    frame_budget: int
    start_frame: int = 0

    def validate(self) -> None:
        lo = np.asarray(self.region_min, dtype=np.float64)
        hi = np.asarray(self.region_max, dtype=np.float64)
        if self.period < 1:
            raise ConfigError("emitter period must be >= 1")
        if self.count < 0:
            raise ConfigError("emitter count must be >= 0")
        if np.any(lo > hi):
            raise ConfigError("emitter region_min exceeds region_max")
        if np.any(lo < 0.0) or np.any(hi > 1.0):
            raise ConfigError(f"emitter region {lo.tolist()}..{hi.tolist()} is not inside the unit cube")

    def emits_at(self, frame: int) -> bool:
        rel = frame - self.start_frame
        return 0 <= rel < self.frame_budget and rel % self.period == 0


@dataclass
class EmittedBatch:
    positions: np.ndarray
    velocities: np.ndarray
    material: Material
    frame: int
    appearance_u: np.ndarray  # per-particle uniform draw for ranged appearance parameters

    def __len__(self) -> int:
        return len(self.positions)


def emit(spec: EmitterSpec, frame: int, rng: np.random.Generator) -> EmittedBatch:
    """Particles emitted by ``spec`` at ``frame``; empty off-period or past the budget."""
    spec.validate()
    if not spec.emits_at(frame) or spec.count == 0:
        return EmittedBatch(np.zeros((0, 3)), np.zeros((0, 3)), spec.material, frame, np.zeros(0))
    lo = np.asarray(spec.region_min, dtype=np.float64)
    hi = np.asarray(spec.region_max, dtype=np.float64)
    pos = lo + (hi - lo) * rng.random((spec.count, 3))
    jit = np.asarray(spec.jitter, dtype=np.float64)
    vel = np.asarray(spec.velocity, dtype=np.float64) + rng.uniform(-1.0, 1.0, (spec.count, 3)) * jit
    return EmittedBatch(pos, vel, spec.material, frame, rng.random(spec.count))


# ---------------------------------------------------------------------------
# keyframed trajectories
# ---------------------------------------------------------------------------

@dataclass
class KeyframeTrack:
    frames: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.frames) < 2 or len(self.frames) != len(self.positions):
            raise ConfigError("a keyframe track needs >= 2 (frame, position) pairs")
        if np.any(np.diff(self.frames) <= 0):
            raise ConfigError("keyframe frames must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs) -> "KeyframeTrack":
        return cls([p[0] for p in pairs], [p[1] for p in pairs])


def keyframed_position(track: KeyframeTrack, frame: float) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear position and velocity (units per frame), clamped at the ends."""
    f = track.frames
    if frame <= f[0]:
        return track.positions[0].copy(), np.zeros(3)
    if frame >= f[-1]:
        return track.positions[-1].copy(), np.zeros(3)
    seg = int(np.searchsorted(f, frame, side="right")) - 1
    p0, p1 = track.positions[seg], track.positions[seg + 1]
    span = f[seg + 1] - f[seg]
    t = (frame - f[seg]) / span
    return p0 + t * (p1 - p0), (p1 - p0) / span
