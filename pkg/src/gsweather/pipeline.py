"""Run configuration and the simulate / render / ablation drivers."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from .collision import (
    AccumulatedSplats,
    WetnessGrid,
    apply_wetness_to_scene,
    decay_wetness,
    resolve_events,
    wet_from_events,
)
from .effects import (
    AssetGaussians,
    CollisionMode,
    EffectPreset,
    apply_overrides,
    canonical_name,
    particles_to_gaussians,
    place_emitter,
    posed_splats,
    preset,
    preset_table,
    to_world_splats,
)
from .frame_state import FrameState, frame_path, read_frame_state, write_frame_state
from .gaussian_core import Splats, concat_flat
from .mesh_geometry import BVH, TriangleMesh
from .mpm.particles import CollisionEvents, ConfigError, MaterialTable, SimConfig
from .mpm.solver import (
    FrameResult,
    SimulationError,
    Simulator,
    gaussians_to_stationary_particles,
)
from .render import render, write_png
from .scene_io import (
    CameraSpec,
    GaussianScene,
    SimTransform,
    compute_normalization,
    load_cameras,
    load_gaussian_ply,
    load_mesh,
    orbit_cameras,
)

CONFIG_VERSION = 1
_SIM_KEYS = {f.name for f in dataclasses.fields(SimConfig)} - {"gravity", "seed", "frames"}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    scene: Path
    mesh: Path
    effect: str
    output: Path
    frames: int = 250
    seed: int = 0
    cameras: Path | None = None
    orbit: dict | None = None
    overrides: dict = field(default_factory=dict)
    collision_handling: bool = True
    transposed_rotation: bool = False
    parallel: bool = False
    asset: Path | None = None
    asset_activated: bool = False
    scene_activated: bool = False
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sim: dict = field(default_factory=dict)
    compress: bool = True
    version: int = CONFIG_VERSION

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {CONFIG_VERSION})")
        self.effect = canonical_name(self.effect)
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        for name in ("scene", "mesh", "cameras", "asset"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")
        unknown = set(self.sim) - _SIM_KEYS
        if unknown:
            raise ConfigError(f"unknown sim keys: {', '.join(sorted(unknown))}")

    def effect_preset(self) -> tuple[EffectPreset, dict[str, str]]:
        return apply_overrides(preset(self.effect), self.overrides)

    def sim_config(self, p: EffectPreset) -> SimConfig:
        return SimConfig(gravity=tuple(p.gravity), seed=self.seed, frames=self.frames, parallel=self.parallel,
                         **self.sim)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
        d["background"] = list(self.background)
        return d


def _path(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def load_run_config(path: str | Path, **cli) -> RunConfig:
    """Read a YAML run config; keyword arguments (CLI flags) win over file values when not None."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for k, v in cli.items():
        if v is not None:
            raw[k] = v
    return run_config_from_dict(raw, path.resolve().parent)


def run_config_from_dict(raw: dict, base: Path = Path(".")) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("scene", "mesh", "effect"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")
    raw = dict(raw)
    for key in ("scene", "mesh", "cameras", "asset"):
        raw[key] = _path(base, raw.get(key))
    raw["output"] = _path(base, raw.get("output", "out"))
    if "background" in raw:
        raw["background"] = tuple(float(x) for x in raw["background"])
    try:
        cfg = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.frames = int(cfg.frames)
    cfg.seed = int(cfg.seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# scene setup
# ---------------------------------------------------------------------------

@dataclass
class SceneSetup:
    scene: GaussianScene
    mesh: TriangleMesh
    transform: SimTransform
    sim_mesh: TriangleMesh
    bvh: BVH
    asset: AssetGaussians | None = None

    @property
    def sim_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.scene.source_bounds
        return self.transform.to_sim(lo), self.transform.to_sim(hi)


def prepare_scene(cfg: RunConfig) -> SceneSetup:
    scene = load_gaussian_ply(cfg.scene, activated=cfg.scene_activated)
    mesh = load_mesh(cfg.mesh)
    transform = compute_normalization(scene, mesh)
    sim_mesh = mesh.transformed(transform.scale, np.asarray(transform.translation))
    asset = None
    if cfg.asset is not None:
        asset = AssetGaussians.bottom_centered(load_gaussian_ply(cfg.asset, activated=cfg.asset_activated).splats)
    return SceneSetup(scene, mesh, transform, sim_mesh, BVH(sim_mesh), asset)


def build_simulator(cfg: RunConfig, setup: SceneSetup, p: EffectPreset) -> Simulator:
    sim_cfg = cfg.sim_config(p)
    emitter = place_emitter(p, *setup.sim_bounds)
    stationary = gaussians_to_stationary_particles(setup.scene, setup.transform)
    return Simulator(sim_cfg, MaterialTable.from_youngs(p.youngs, p.poisson), [emitter], stationary,
                     p.keyframe_track(), cfg.transposed_rotation)


def new_wetness(setup: SceneSetup, p: EffectPreset) -> WetnessGrid | None:
    if p.collision_mode != CollisionMode.WETNESS_GRID:
        return None
    lo, hi = setup.sim_mesh.bounds
    return WetnessGrid.around(lo, hi, p.wetness_resolution, p.wetness_decay)


def rest_splats(events: CollisionEvents, p: EffectPreset, setup: SceneSetup, appearance_u: np.ndarray,
                seed: int, enabled: bool) -> AccumulatedSplats:
    """World-space splats for particles that came to rest this frame."""
    if len(events) == 0:
        return AccumulatedSplats.empty()
    if setup.asset is not None and p.collision_mode == CollisionMode.NONE:
        n_per = len(setup.asset.splats)
        scales = np.zeros((len(events), 3))
        splats = posed_splats(p, events.positions, events.rotations, scales, setup.transform, setup.asset)
        ids = np.repeat(events.particle_ids, n_per)
        return AccumulatedSplats(splats, np.repeat(events.frames, n_per), ids)
    sim = resolve_events(events, p, setup.bvh, appearance_u, seed, enabled)
    if len(sim) == 0:
        return AccumulatedSplats.empty()
    return AccumulatedSplats(to_world_splats(sim, setup.transform), events.frames.copy(), events.particle_ids.copy())


@dataclass
class FrameOutput:
    result: FrameResult
    state: FrameState


def simulate_frames(cfg: RunConfig, setup: SceneSetup, p: EffectPreset) -> Iterator[FrameOutput]:
    """Run the emit/step/track/resolve loop, yielding one frame state per output frame."""
    sim = build_simulator(cfg, setup, p)
    wet = new_wetness(setup, p)
    handle = cfg.collision_handling
    for _ in range(cfg.frames):
        frame = sim.frame
        try:
            res = sim.advance()
        except (ValueError, ArithmeticError) as exc:
            if isinstance(exc, SimulationError):
                raise
            raise SimulationError(f"frame {frame}: {exc}", frame) from exc
        ps = sim.particles
        dynamic = particles_to_gaussians(ps, p, frame, setup.transform, cfg.seed, setup.asset,
                                         cfg.transposed_rotation)
        if wet is not None and handle:
            decay_wetness(wet)
            wet_from_events(wet, res.events, setup.bvh)
        acc = rest_splats(res.events, p, setup, ps.appearance_u[res.events.particle_ids], cfg.seed, handle)
        state = FrameState(frame, dynamic, acc, None if wet is None or not handle else wet.copy(), res.active)
        yield FrameOutput(res, state)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def run_simulate(cfg: RunConfig, progress=None) -> dict:
    """Simulate ``cfg.frames`` frames, writing one frame-state file per frame. Returns the summary."""
    p, provenance = cfg.effect_preset()
    setup = prepare_scene(cfg)
    out = Path(cfg.output)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    totals = {"emitted": 0, "collided": 0, "exited": 0}
    last_active = 0
    for fo in simulate_frames(cfg, setup, p):
        write_frame_state(fo.state, frame_path(frames_dir, fo.state.frame), cfg.compress)
        totals["emitted"] += fo.result.emitted
        totals["collided"] += len(fo.result.events)
        totals["exited"] += fo.result.exited
        last_active = fo.result.active
        if progress is not None:
            progress(fo)
    summary = {
        "effect": p.name,
        "frames": cfg.frames,
        "seed": cfg.seed,
        "totals": totals,
        "active_at_end": last_active,
    }
    _write_json(out / "run.json", {
        "config": cfg.to_dict(),
        "transform": setup.transform.to_dict(),
        "preset": [list(r) for r in preset_table(p, provenance)],
        "summary": summary,
    })
    return summary


def parse_frame_range(text: str | None, limit: int | None = None) -> range | None:
    """``"a..b"`` (inclusive) or a single index ``"k"``."""
    if text is None:
        return None
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            start = int(a) if a else 0
            stop = int(b) if b else (limit - 1 if limit is not None else None)
            if stop is None:
                raise ConfigError("open-ended frame range needs a known frame count")
        else:
            start = stop = int(text)
    except ValueError as exc:
        raise ConfigError(f"bad frame range {text!r}; expected a..b or k") from exc
    if start < 0 or stop < start:
        raise ConfigError(f"bad frame range {text!r}")
    return range(start, stop + 1)


def render_cameras(cfg: RunConfig, scene: GaussianScene) -> list[CameraSpec]:
    if cfg.cameras is not None:
        return load_cameras(cfg.cameras)
    orbit = dict(cfg.orbit or {})
    lo, hi = scene.source_bounds
    extent = float(np.max(hi - lo))
    center = orbit.pop("center", (0.5 * (lo + hi)).tolist())
    return orbit_cameras(
        center,
        float(orbit.pop("radius", 1.5 * extent)),
        float(orbit.pop("elevation", 25.0)),
        int(orbit.pop("count", 4)),
        int(orbit.pop("width", 640)),
        int(orbit.pop("height", 480)),
        float(orbit.pop("fov", 50.0)),
    )


def _load_transform(out: Path) -> SimTransform:
    meta = json.loads((out / "run.json").read_text(encoding="utf-8"))
    t = meta["transform"]
    return SimTransform(t["scale"], tuple(t["translation"]), t["ground_height"])


def compose_frame(scene: GaussianScene, static_sim: np.ndarray, camera: CameraSpec, state: FrameState,
                  accumulated: list[Splats], gain: float) -> tuple[Splats, np.ndarray]:
    """Static scene (SH evaluated for ``camera``, wetness applied) followed by dynamic and rest splats."""
    colors = scene.splats.colors_for(camera.center)
    if state.wetness is not None:
        colors = apply_wetness_to_scene(colors, static_sim, state.wetness, gain)
    static = scene.splats.with_flat_colors(colors)
    dyn = [_f64(state.dynamic)] + [_f64(a) for a in accumulated]
    allsplats = concat_flat([static] + dyn)
    return allsplats, allsplats.colors


def _f64(s: Splats) -> Splats:
    f = np.float64
    return Splats(s.positions.astype(f), s.rotations.astype(f) / np.linalg.norm(s.rotations.astype(f), axis=1,
                                                                                keepdims=True),
                  s.scales.astype(f), s.opacities.astype(f), colors=s.colors.astype(f))


def run_render(cfg: RunConfig, frames: range | None = None) -> list[Path]:
    """Render stored frame states to ``output/renders/camXX/frame_NNNNN.png``."""
    out = Path(cfg.output)
    frames_dir = out / "frames"
    if frames is None:
        frames = range(cfg.frames)
    missing = [f for f in range(frames.stop) if not frame_path(frames_dir, f).is_file()]
    if missing:
        shown = ", ".join(str(m) for m in missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise FileNotFoundError(f"missing frame states in {frames_dir}: {shown}")
    p, _ = cfg.effect_preset()
    scene = load_gaussian_ply(cfg.scene, activated=cfg.scene_activated)
    transform = _load_transform(out)
    static_sim = transform.to_sim(scene.splats.positions)
    cams = render_cameras(cfg, scene)
    written = []
    accumulated: list[Splats] = []
    for f in range(frames.stop):
        state = read_frame_state(frame_path(frames_dir, f))
        if len(state.accumulated):
            accumulated.append(state.accumulated.splats)
        if f not in frames:
            continue
        for c, cam in enumerate(cams):
            splats, colors = compose_frame(scene, static_sim, cam, state, accumulated, p.wetness_gain)
            img = render(splats, cam, cfg.background, colors, parallel=cfg.parallel)
            d = out / "renders" / f"cam{c:02d}"
            d.mkdir(parents=True, exist_ok=True)
            path = d / f"frame_{f:05d}.png"
            write_png(img, path)
            written.append(path)
    return written


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# collision-handling ablation
# ---------------------------------------------------------------------------

def normal_offsets(bvh: BVH, points: np.ndarray) -> np.ndarray:
    """Signed distance of each point from its closest mesh point, measured along the hit normal."""
    if len(points) == 0:
        return np.zeros(0)
    hits = bvh.query(points)
    return np.einsum("ij,ij->i", points - hits.points, hits.normals)


def run_ablation(cfg: RunConfig) -> dict:
    """Simulate once and resolve every rest event both with and without collision handling.

    Distances are in simulation units.
    """
    p, _ = cfg.effect_preset()
    setup = prepare_scene(cfg)
    sim = build_simulator(cfg, setup, p)
    on, off = [], []
    for _ in range(cfg.frames):
        res = sim.advance()
        ev = res.events
        if len(ev) == 0:
            continue
        u = sim.particles.appearance_u[ev.particle_ids]
        on.append(resolve_events(ev, p, setup.bvh, u, cfg.seed, True).positions)
        off.append(resolve_events(ev, p, setup.bvh, u, cfg.seed, False).positions)
    on_pts = np.concatenate(on) if on else np.zeros((0, 3))
    off_pts = np.concatenate(off) if off else np.zeros((0, 3))
    d_on = normal_offsets(setup.bvh, on_pts)
    d_off = np.abs(normal_offsets(setup.bvh, off_pts))
    report = {
        "effect": p.name,
        "frames": cfg.frames,
        "events": int(len(off_pts)),
        "surface_offset": p.surface_offset,
        "with_handling": {
            "count": int(len(d_on)),
            "mean_distance": float(np.abs(d_on).mean()) if len(d_on) else None,
            "max_offset_error": float(np.max(np.abs(d_on - p.surface_offset))) if len(d_on) else None,
        },
        "without_handling": {
            "count": int(len(d_off)),
            "mean_distance": float(d_off.mean()) if len(d_off) else None,
        },
    }
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", report)
    return report


def list_presets(cfg: RunConfig | None = None, names: list[str] | None = None) -> str:
    """Human-readable table of presets; with ``cfg`` the run's effect is shown with its overrides."""
    blocks = []
    if cfg is not None:
        p, prov = cfg.effect_preset()
        targets = [(p, prov)]
    else:
        from .effects import EFFECT_NAMES

        targets = [(preset(n), {}) for n in (names or EFFECT_NAMES)]
    for p, prov in targets:
        rows = preset_table(p, prov)
        w = max(len(k) for k, _, _ in rows)
        lines = [f"[{p.name}]"] + [f"  {k:<{w}}  {v}" + ("  (override)" if s == "override" else "")
                                  for k, v, s in rows]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)
