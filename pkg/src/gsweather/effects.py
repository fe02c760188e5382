"""Effect presets, particle-to-Gaussian conversion and asset alignment.

All preset lengths (render scales, surface offsets, clone offsets) are in
simulation units, i.e. fractions of the unit simulation cube; they are
divided by the normalization scale when splats are written in world units.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .gaussian_core import Splats, quat_conjugate, quat_multiply, quat_normalize, rotate_vectors
from .mpm.particles import ConfigError, EmitterSpec, KeyframeTrack, Material, ParticleState
from .mpm.solver import rotation_from_deformation
from .scene_io import SimTransform


class CollisionMode(str, enum.Enum):
    SURFACE_PROJECT = "surface_project"
    WETNESS_GRID = "wetness_grid"
    SAND_ACCUMULATE = "sand_accumulate"
    NONE = "none"


EFFECT_NAMES = ("snowfall", "rainfall", "fog", "sandstorm", "leaves", "feather", "rigid_object")


@dataclass
class ClonePolicy:
    """One extra low-opacity splat per dynamic splat, displaced by a random offset."""

    offset_min: float
    offset_max: float
    scale: float
    opacity: float


@dataclass
class EmitterPlan:
    """Emitter parameters before they are placed relative to a scene.

    ``placement`` selects how the region is derived from the scene's
    simulation-space bounding box: ``top`` (plane above the scene),
    ``side`` (the low-x face), ``volume`` (the scene box) or ``point``.
    """

    count: int
    period: int
    velocity: tuple[float, float, float]
    jitter: tuple[float, float, float]
    frame_budget: int
    placement: str
    height: float = 0.95
    side_x: float = 0.02
    y_range: tuple[float, float] = (0.1, 0.6)
    point: tuple[float, float, float] = (0.5, 0.85, 0.5)


@dataclass
class EffectPreset:
    name: str
    youngs: float
    poisson: float
    material: Material
    emitter: EmitterPlan
    gravity: tuple[float, float, float]
    render_scale: tuple[float, float, float]
    render_scale_max: tuple[float, float, float] | None
    render_opacity: float
    render_color: tuple[float, float, float]
    collision_mode: CollisionMode
    surface_offset: float = 0.0
    accumulated_scale: tuple[float, float] = (0.0, 0.0)
    normal_flatten: float = 1.0
    clone: ClonePolicy | None = None
    wetness_decay: float = 0.95
    wetness_resolution: int = 64
    wetness_gain: float = 0.4
    asset_scale: float = 1.0
    track: list | None = None
    rotate: bool = True

    def validate(self) -> None:
        if not self.youngs > 0:
            raise ConfigError("youngs modulus must be positive")
        if not 0 < self.poisson < 0.5:
            raise ConfigError("poisson ratio must lie in (0, 0.5)")
        if not 0 < self.render_opacity <= 1:
            raise ConfigError("render opacity must lie in (0, 1]")
        if min(self.render_scale) <= 0:
            raise ConfigError("render scale components must be positive")
        if self.render_scale_max is not None and np.any(np.less(self.render_scale_max, self.render_scale)):
            raise ConfigError("render_scale_max must not be below render_scale")
        if not 0 < self.wetness_decay < 1:
            raise ConfigError("wetness decay must lie in (0, 1)")
        if self.emitter.period < 1 or self.emitter.count < 0:
            raise ConfigError("emitter needs period >= 1 and count >= 0")

    def keyframe_track(self) -> KeyframeTrack | None:
        return None if self.track is None else KeyframeTrack.from_pairs(self.track)


def _iso(s: float) -> tuple[float, float, float]:
    return (s, s, s)


def _presets() -> dict[str, EffectPreset]:
    snow = EffectPreset(
        name="snowfall", youngs=0.14, poisson=0.2, material=Material.SNOW,
        emitter=EmitterPlan(1000, 2, (0.0, -0.5, 0.0), (0.1, 0.0, 0.1), 250, "top"),
        gravity=(0.0, -9.8, 0.0), render_scale=_iso(0.005), render_scale_max=None, render_opacity=0.65,
        render_color=(0.95, 0.95, 0.96), collision_mode=CollisionMode.SURFACE_PROJECT,
        surface_offset=0.01, accumulated_scale=(0.01, 0.01),
    )
    rain = EffectPreset(
        name="rainfall", youngs=0.08, poisson=0.45, material=Material.FLUID,
        emitter=EmitterPlan(1000, 2, (0.0, -0.5, 0.0), (0.1, 0.0, 0.1), 250, "top"),
        gravity=(0.0, -9.8, 0.0), render_scale=(0.002, 0.006, 0.002), render_scale_max=None, render_opacity=0.25,
        render_color=(0.85, 0.87, 0.9), collision_mode=CollisionMode.WETNESS_GRID,
        wetness_decay=0.95, wetness_resolution=64,
    )
    sand = EffectPreset(
        name="sandstorm", youngs=0.08, poisson=0.3, material=Material.SAND,
        emitter=EmitterPlan(1000, 2, (1.0, 0.0, 0.0), (0.2, 0.2, 0.0), 250, "side"),
        gravity=(0.0, -9.8, 0.0), render_scale=_iso(0.0025), render_scale_max=_iso(0.003), render_opacity=0.85,
        render_color=(0.92, 0.79, 0.62), collision_mode=CollisionMode.SAND_ACCUMULATE,
        surface_offset=0.001, accumulated_scale=(0.015, 0.025), normal_flatten=0.2,
        clone=ClonePolicy(0.001, 0.005, 0.035, 0.15),
    )
    fog = EffectPreset(
        name="fog", youngs=0.08, poisson=0.45, material=Material.FLUID,
        emitter=EmitterPlan(5000, 1, (0.5, 0.0, 0.0), (0.1, 0.1, 0.1), 1, "volume"),
        gravity=(0.5, -0.1, 0.0), render_scale=_iso(0.25), render_scale_max=None, render_opacity=0.08,
        render_color=(0.85, 0.85, 0.85), collision_mode=CollisionMode.NONE, rotate=False,
    )
    leaves = EffectPreset(
        name="leaves", youngs=0.8, poisson=0.3, material=Material.SNOW,
        emitter=EmitterPlan(7, 25, (0.0, -0.15, 0.0), (0.05, 0.05, 0.05), 250, "top", height=0.9),
        gravity=(0.0, -4.8, 0.0), render_scale=_iso(0.03), render_scale_max=None, render_opacity=0.85,
        render_color=(0.56, 0.36, 0.12), collision_mode=CollisionMode.NONE, asset_scale=0.035,
    )
    feather = EffectPreset(
        name="feather", youngs=0.8, poisson=0.3, material=Material.RIGID,
        emitter=EmitterPlan(1, 1, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1, "point"),
        gravity=(0.0, -9.8, 0.0), render_scale=_iso(0.03), render_scale_max=None, render_opacity=0.85,
        render_color=(0.95, 0.93, 0.88), collision_mode=CollisionMode.NONE, asset_scale=0.12,
        track=[(0, (0.5, 0.85, 0.5)), (60, (0.56, 0.65, 0.47)), (120, (0.45, 0.45, 0.53)),
               (180, (0.53, 0.25, 0.48)), (240, (0.5, 0.06, 0.5))],
    )
    rigid = EffectPreset(
        name="rigid_object", youngs=0.8, poisson=0.3, material=Material.RIGID,
        emitter=EmitterPlan(1, 1, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1, "point"),
        gravity=(0.0, -9.8, 0.0), render_scale=_iso(0.03), render_scale_max=None, render_opacity=0.85,
        render_color=(0.5, 0.5, 0.55), collision_mode=CollisionMode.NONE, asset_scale=0.075,
        track=[(0, (0.5, 0.85, 0.5)), (150, (0.5, 0.3, 0.5)), (200, (0.5, 0.08, 0.5))],
    )
    return {p.name: p for p in (snow, rain, fog, sand, leaves, feather, rigid)}


_ALIASES = {"snow": "snowfall", "rain": "rainfall", "sand": "sandstorm", "rigid": "rigid_object",
            "rigidobject": "rigid_object", "drone": "rigid_object", "leaf": "leaves"}


def canonical_name(name: str) -> str:
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    key = _ALIASES.get(key.replace("_", ""), _ALIASES.get(key, key))
    if key not in EFFECT_NAMES:
        raise ConfigError(f"unknown effect {name!r}; expected one of {', '.join(EFFECT_NAMES)}")
    return key


def preset(name: str) -> EffectPreset:
    """Fresh copy of the named preset."""
    return _presets()[canonical_name(name)]


# ---------------------------------------------------------------------------
# overrides
# ---------------------------------------------------------------------------

def override_keys(p: EffectPreset | None = None) -> list[str]:
    """Dotted keys accepted by :func:`apply_overrides`."""
    p = p or preset("snowfall")
    keys = []
    for f in dataclasses.fields(p):
        if f.name in ("name", "emitter", "clone"):
            continue
        keys.append(f.name)
    keys += [f"emitter.{f.name}" for f in dataclasses.fields(EmitterPlan)]
    keys += [f"clone.{f.name}" for f in dataclasses.fields(ClonePolicy)]
    return keys


def _coerce(old, value, key: str):
    if isinstance(old, enum.Enum):
        try:
            return type(old)(value)
        except ValueError as exc:
            raise ConfigError(f"override {key}: {exc}") from exc
    if isinstance(old, bool):
        return bool(value)
    if isinstance(old, int) and not isinstance(value, bool):
        if float(value) != int(value):
            raise ConfigError(f"override {key} must be an integer")
        return int(value)
    if isinstance(old, float):
        return float(value)
    if isinstance(old, tuple):
        if np.isscalar(value):
            value = [value] * len(old)
        if len(value) != len(old):
            raise ConfigError(f"override {key} needs {len(old)} values")
        return tuple(float(v) for v in value)
    return value


def apply_overrides(p: EffectPreset, overrides: dict) -> tuple[EffectPreset, dict[str, str]]:
    """Return an overridden copy and a provenance map ``key -> 'override'``."""
    p = dataclasses.replace(p, emitter=dataclasses.replace(p.emitter),
                            clone=None if p.clone is None else dataclasses.replace(p.clone))
    provenance = {}
    for key, value in (overrides or {}).items():
        head, _, tail = key.partition(".")
        if tail:
            if head not in ("emitter", "clone"):
                raise ConfigError(f"unknown override key {key!r}")
            target = getattr(p, head)
            if target is None:
                raise ConfigError(f"preset {p.name} has no {head} block")
            if tail not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(f"unknown override key {key!r}")
            setattr(target, tail, _coerce(getattr(target, tail), value, key))
        else:
            if head not in {f.name for f in dataclasses.fields(p)} or head in ("name", "emitter", "clone"):
                raise ConfigError(f"unknown override key {key!r}")
            old = getattr(p, head)
            if head == "render_scale_max" and old is None:
                old = p.render_scale
            if head == "track":
                setattr(p, head, [(float(f), tuple(map(float, x))) for f, x in value])
                provenance[key] = "override"
                continue
            setattr(p, head, _coerce(old, value, key))
        provenance[key] = "override"
    p.validate()
    return p, provenance


def preset_table(p: EffectPreset, provenance: dict[str, str] | None = None) -> list[tuple[str, str, str]]:
    """Flattened ``(key, value, source)`` rows for display."""
    provenance = provenance or {}
    rows = []
    for key in ["name"] + override_keys(p):
        head, _, tail = key.partition(".")
        obj = getattr(p, head)
        if tail:
            if obj is None:
                continue
            obj = getattr(obj, tail)
        if isinstance(obj, enum.Enum):
            obj = obj.name.lower() if isinstance(obj, Material) else obj.value
        rows.append((key, _fmt(obj), provenance.get(key, "default")))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    if isinstance(v, tuple):
        return "(" + ", ".join(_fmt(x) for x in v) + ")"
    if isinstance(v, list):
        return "[" + ", ".join(f"{_fmt(float(f))}:{_fmt(tuple(x))}" for f, x in v) + "]"
    return str(v)


# ---------------------------------------------------------------------------
# emitter placement
# ---------------------------------------------------------------------------

def place_emitter(p: EffectPreset, sim_lo: np.ndarray, sim_hi: np.ndarray) -> EmitterSpec:
    """Concrete emitter region for a scene whose simulation-space bounds are ``[sim_lo, sim_hi]``."""
    plan = p.emitter
    lo = np.clip(np.asarray(sim_lo, dtype=np.float64), 0.0, 1.0)
    hi = np.clip(np.asarray(sim_hi, dtype=np.float64), 0.0, 1.0)
    if plan.placement == "top":
        rmin = (lo[0], plan.height, lo[2])
        rmax = (hi[0], plan.height, hi[2])
    elif plan.placement == "side":
        rmin = (plan.side_x, plan.y_range[0], lo[2])
        rmax = (plan.side_x, plan.y_range[1], hi[2])
    elif plan.placement == "volume":
        rmin, rmax = tuple(lo), tuple(hi)
    elif plan.placement == "point":
        start = p.track[0][1] if p.track else plan.point
        rmin = rmax = tuple(float(x) for x in start)
    else:
        raise ConfigError(f"unknown emitter placement {plan.placement!r}")
    return EmitterSpec(tuple(map(float, rmin)), tuple(map(float, rmax)), plan.count, plan.period, plan.velocity,
                       plan.jitter, p.material, plan.frame_budget)


# ---------------------------------------------------------------------------
# assets
# ---------------------------------------------------------------------------

@dataclass
class AssetGaussians:
    """Gaussians of an object in its own frame, anchored at ``reference_point``."""

    splats: Splats
    reference_point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    reference_orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self) -> None:
        self.reference_point = np.asarray(self.reference_point, dtype=np.float64)
        q = np.asarray(self.reference_orientation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("reference orientation must be a unit quaternion")
        self.reference_orientation = q

    @classmethod
    def bottom_centered(cls, splats: Splats) -> "AssetGaussians":
        """Anchor at the bottom centre of the splat-centre bounding box."""
        lo = splats.positions.min(axis=0)
        hi = splats.positions.max(axis=0)
        ref = 0.5 * (lo + hi)
        ref[1] = lo[1]
        return cls(splats, ref)


def align_asset(asset: AssetGaussians, position: np.ndarray, rotation: np.ndarray, scale: float) -> Splats:
    """Place ``asset`` at a particle pose, scaled uniformly by ``scale``.

    The reference point lands on ``position`` and the reference orientation
    is replaced by ``rotation``.
    """
    q = quat_normalize(quat_multiply(np.asarray(rotation, dtype=np.float64),
                                     quat_conjugate(asset.reference_orientation)))
    s = asset.splats
    local = s.positions - asset.reference_point
    pos = scale * rotate_vectors(np.broadcast_to(q, (len(s), 4)), local) + np.asarray(position, dtype=np.float64)
    rot = quat_normalize(quat_multiply(np.broadcast_to(q, (len(s), 4)), s.rotations))
    return Splats(pos, rot, s.scales * scale, s.opacities.copy(),
                  colors=None if s.colors is None else s.colors.copy(),
                  sh=None if s.sh is None else s.sh.copy())


# ---------------------------------------------------------------------------
# particles -> Gaussians
# ---------------------------------------------------------------------------

def dynamic_scales(p: EffectPreset, u: np.ndarray) -> np.ndarray:
    """Per-particle render scale, interpolating ranged presets with the stored uniforms ``u``."""
    lo = np.asarray(p.render_scale, dtype=np.float64)
    if p.render_scale_max is None:
        return np.broadcast_to(lo, (len(u), 3)).copy()
    hi = np.asarray(p.render_scale_max, dtype=np.float64)
    return lo + (hi - lo) * np.asarray(u)[:, None]


def particle_rotations(p: EffectPreset, F: np.ndarray, transposed_rotation: bool = False) -> np.ndarray:
    if not p.rotate or len(F) == 0:
        out = np.zeros((len(F), 4))
        out[:, 0] = 1.0
        return out
    return rotation_from_deformation(F, transposed_rotation)


def to_world_splats(sim_splats: Splats, transform: SimTransform) -> Splats:
    return Splats(transform.to_world(sim_splats.positions), sim_splats.rotations, sim_splats.scales / transform.scale,
                  sim_splats.opacities, colors=sim_splats.colors, sh=sim_splats.sh)


def posed_splats(p: EffectPreset, positions: np.ndarray, rotations: np.ndarray, scales: np.ndarray,
                 transform: SimTransform, asset: AssetGaussians | None = None) -> Splats:
    """World-space splats for simulation-space poses, expanding assets when given."""
    n = len(positions)
    if asset is not None and n:
        world = transform.to_world(positions)
        parts = [align_asset(asset, world[i], rotations[i], p.asset_scale / transform.scale) for i in range(n)]
        return Splats(
            np.concatenate([a.positions for a in parts]), np.concatenate([a.rotations for a in parts]),
            np.concatenate([a.scales for a in parts]), np.concatenate([a.opacities for a in parts]),
            colors=np.concatenate([a.colors for a in parts]) if parts[0].colors is not None else None,
            sh=np.concatenate([a.sh for a in parts]) if parts[0].sh is not None else None,
        )
    colors = np.broadcast_to(np.asarray(p.render_color, dtype=np.float64), (n, 3)).copy()
    sim = Splats(np.asarray(positions, dtype=np.float64).reshape(n, 3), rotations, scales,
                 np.full(n, p.render_opacity), colors=colors)
    return to_world_splats(sim, transform)


def clone_splats(p: EffectPreset, positions: np.ndarray, rotations: np.ndarray, rng: np.random.Generator) -> Splats:
    """Sand clones in simulation units: random direction, offset length uniform in the clone range."""
    c = p.clone
    n = len(positions)
    d = rng.normal(size=(n, 3))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    r = rng.uniform(c.offset_min, c.offset_max, n)
    colors = np.broadcast_to(np.asarray(p.render_color, dtype=np.float64), (n, 3)).copy()
    return Splats(positions + d * r[:, None], rotations.copy(), np.full((n, 3), c.scale), np.full(n, c.opacity),
                  colors=colors)


def particles_to_gaussians(particles: ParticleState, p: EffectPreset, frame: int, transform: SimTransform,
                           seed: int = 0, asset: AssetGaussians | None = None,
                           transposed_rotation: bool = False) -> Splats:
    """World-space splats for the active dynamic particles of one frame (plus sand clones).

    Collided particles are handled by the collision module.
    """
    idx = np.flatnonzero(particles.active & (particles.material != Material.STATIONARY))
    if len(idx) == 0:
        return Splats.empty()
    pos = particles.x[idx]
    rot = particle_rotations(p, particles.F[idx], transposed_rotation)
    scales = dynamic_scales(p, particles.appearance_u[idx])
    base = posed_splats(p, pos, rot, scales, transform, asset)
    if p.clone is None:
        return base
    rng = np.random.default_rng([seed, frame, 0xC10E])
    clones = to_world_splats(clone_splats(p, pos, rot, rng), transform)
    return Splats(
        np.concatenate([base.positions, clones.positions]), np.concatenate([base.rotations, clones.rotations]),
        np.concatenate([base.scales, clones.scales]), np.concatenate([base.opacities, clones.opacities]),
        colors=np.concatenate([base.colors, clones.colors]),
    )
