"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import json
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gsweather import cli
from gsweather.collision import WetnessGrid, apply_wetness_to_scene, decay_wetness, splat_wetness
from gsweather.effects import AssetGaussians, align_asset, preset
from gsweather.frame_state import frame_path
from gsweather.gaussian_core import Splats
from gsweather.mpm import (
    Material,
    MaterialTable,
    MpmState,
    ParticleState,
    SimConfig,
    rotation_matrix_from_deformation,
    step,
    update_active_flags,
)
from gsweather.pipeline import build_simulator, file_digest, load_run_config, prepare_scene
from gsweather.render import render
from gsweather.synthetic import write_demo
from golden import GOLDEN, SIM
from helpers import camera, random_flat_splats, random_quats, random_rotations
from oracles import brute_render_fast, symplectic_euler

pytestmark = pytest.mark.slow


@pytest.fixture
def criterion(capsys):
    """Run ``check`` (returning a short detail string) and print one PASS/FAIL line."""

    def run(number, title, check):
        t0 = time.perf_counter()
        try:
            detail = check()
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            with capsys.disabled():
                print(f"\nCRITERION {number:2d} FAIL  {title}: {msg} [{time.perf_counter() - t0:.1f}s]")
            raise
        with capsys.disabled():
            print(f"\nCRITERION {number:2d} PASS  {title}: {detail} [{time.perf_counter() - t0:.1f}s]")

    return run


def _cli(*args):
    code = cli.main([str(a) for a in args])
    assert code == 0, f"gsweather {' '.join(map(str, args))} exited with {code}"


def test_c01_renderer_matches_full_sort(criterion):
    def check():
        rng = np.random.default_rng(101)
        scenes = []
        for _ in range(50):
            w, h = rng.integers(8, 65, 2)
            sp = random_flat_splats(rng, int(rng.integers(1, 101)))
            scenes.append((sp, camera(int(w), int(h), fx=float(rng.uniform(0.5, 1.2) * w))))
        bg = rng.uniform(size=3)
        t0 = time.perf_counter()
        images = [render(sp, cam, bg) for sp, cam in scenes]
        elapsed = time.perf_counter() - t0
        worst = max(np.abs(img - brute_render_fast(sp, cam, bg)).max() for img, (sp, cam) in zip(images, scenes))
        assert worst <= 1e-6, f"max channel error {worst:.3g}"
        assert elapsed < 10.0, f"tiled renders took {elapsed:.2f}s"
        return f"max error {worst:.2e}, tiled renders {elapsed:.2f}s for 50 scenes"

    criterion(1, "tiled renderer vs full-sort oracle", check)


def test_c02_rotation_extraction(criterion):
    def check():
        rng = np.random.default_rng(102)
        R = random_rotations(rng, 1000)
        Q = random_rotations(rng, 1000)
        S = Q @ (rng.uniform(0.3, 3.0, (1000, 3))[:, :, None] * np.swapaxes(Q, 1, 2))
        t0 = time.perf_counter()
        got = rotation_matrix_from_deformation(R @ S)
        elapsed = time.perf_counter() - t0
        err = np.linalg.norm(got - R, axis=(1, 2)).max()
        assert err <= 1e-6, f"max Frobenius error {err:.3g}"
        assert elapsed < 1.0, f"took {elapsed:.3f}s"
        return f"max Frobenius error {err:.2e} in {elapsed * 1e3:.1f}ms"

    criterion(2, "rotation from F = R S", check)


def _tracked(x, prev, material=Material.FLUID):
    ps = ParticleState()
    ps.append(np.array([prev], float), np.zeros((1, 3)), material, 0)
    ps.x[:] = x
    return MpmState(ps, MaterialTable.from_youngs(0.14, 0.2), frame=30)


def test_c03_active_tracking(criterion, tmp_path):
    def check():
        cfg = SimConfig()
        st = _tracked([0.5, 0.5004, 0.5], [0.5, 0.5, 0.5])
        upd = update_active_flags(st, cfg)
        assert not st.particles.active[0] and len(upd.events) == 1, "small motion branch"
        st = _tracked([0.5, -0.2, 0.5], [0.5, -0.1, 0.5])
        upd = update_active_flags(st, cfg)
        assert not st.particles.active[0] and len(upd.events) == 0 and upd.exited == 1, "exit branch"
        st = _tracked([0.5, 0.45, 0.5], [0.5, 0.5, 0.5])
        before = st.particles.snapshot()
        upd = update_active_flags(st, cfg)
        assert len(upd.events) == 0 and all(np.array_equal(v, before[k]) for k, v in st.particles.snapshot().items())

        cfg_run = load_run_config(write_demo(tmp_path, frames=250),
                                  overrides={"emitter.frame_budget": 100})
        p, _ = cfg_run.effect_preset()
        sim = build_simulator(cfg_run, prepare_scene(cfg_run), p)
        counts = []
        for _ in range(250):
            res = sim.advance()
            counts.append(res.active)
        tail = np.array(counts[99:])
        rises = np.flatnonzero(np.diff(tail) > 0)
        assert len(rises) == 0, f"active count rose after frame {99 + rises[0]}"
        assert counts[98] > 0 and tail[-1] < counts[98]
        return f"three branches ok; active {counts[98]} at frame 98 -> {tail[-1]} at frame 249, never rising"

    criterion(3, "active tracking", check)


def _mixed_particles(rng, n, lo, hi, speed):
    ps = ParticleState()
    mats = rng.choice([Material.SNOW, Material.FLUID, Material.SAND], n)
    ps.append(rng.uniform(lo, hi, (n, 3)), rng.normal(scale=speed, size=(n, 3)), mats, 0)
    return ps


def test_c04_conservation(criterion):
    def check():
        rng = np.random.default_rng(104)
        worst = {"mass": 0.0, "momentum": 0.0}
        calls = {"n": 0}

        def mass_hook(gm, gv, mass_before, mom_before):
            calls["n"] += 1
            worst["mass"] = max(worst["mass"], abs(gm.sum() - mass_before) / mass_before)

        g = (np.arange(10, 54) + 0.5) / 64
        X, Z = np.meshgrid(g, g, indexing="ij")
        floor = np.stack([X.ravel(), np.full(X.size, 0.15), Z.ravel()], axis=1)
        stat = ParticleState(len(floor))
        stat.append(floor, np.zeros_like(floor), Material.STATIONARY, 0)
        state = MpmState(_mixed_particles(rng, 3000, 0.3, 0.6, 0.3), MaterialTable.from_youngs(0.14, 0.2), stat,
                         p2g_hook=mass_hook)
        cfg = SimConfig()
        for _ in range(100):
            step(state, cfg)

        def mom_hook(gm, gv, mass_before, mom_before):
            mass_hook(gm, gv, mass_before, mom_before)
            p = gv.sum(axis=(0, 1, 2))
            scale = max(np.abs(mom_before).max(), 1e-300)
            worst["momentum"] = max(worst["momentum"], np.abs(p - mom_before).max() / scale)

        state = MpmState(_mixed_particles(rng, 3000, 0.4, 0.6, 0.05), MaterialTable.from_youngs(0.14, 0.2),
                         p2g_hook=mom_hook)
        cfg = SimConfig(gravity=(0.0, 0.0, 0.0))
        for _ in range(100):
            step(state, cfg)
        x = state.particles.x
        lo, hi = cfg.clamp_bounds
        assert x.min() > lo + 2 * cfg.dx and x.max() < hi - 2 * cfg.dx, "particles reached the boundary"
        assert worst["mass"] <= 1e-9, f"mass error {worst['mass']:.3g}"
        assert worst["momentum"] <= 1e-9, f"momentum error {worst['momentum']:.3g}"
        return f"{calls['n']} transfers, max relative mass error {worst['mass']:.1e}, momentum {worst['momentum']:.1e}"

    criterion(4, "P2G conservation", check)


def test_c05_ballistic(criterion):
    def check():
        cfg = SimConfig()
        x0, v0 = np.array([0.4, 0.5, 0.5]), np.array([0.3, 2.45, 0.0])
        ps = ParticleState()
        ps.append(x0[None], v0[None], Material.SNOW, 0)
        state = MpmState(ps, MaterialTable.from_youngs(0.14, 0.2))
        worst = 0.0
        for f in range(1, 101):
            step(state, cfg)
            x_ref, _ = symplectic_euler(x0, v0, cfg.gravity, cfg.dt, f * cfg.substeps)
            worst = max(worst, np.abs(state.particles.x[0] - x_ref).max())
        assert worst <= 1e-5, f"max deviation {worst:.3g}"
        return f"max deviation {worst:.2e} over 100 frames"

    criterion(5, "ballistic particle", check)


def test_c06_golden_presets(criterion):
    def check():
        checked = 0
        for name, fields in GOLDEN.items():
            p = preset(name)
            for key, value in fields.items():
                head, _, tail = key.partition(".")
                got = getattr(getattr(p, head), tail) if tail else getattr(p, head)
                assert got == value, f"{name}.{key} = {got!r}, expected {value!r}"
                checked += 1
        cfg = SimConfig()
        for key, value in SIM.items():
            assert getattr(cfg, key) == value, f"sim {key}"
            checked += 1
        return f"{checked} values equal"

    criterion(6, "preset golden table", check)


def test_c07_collision_ablation(criterion, tmp_path):
    def check():
        cfg_path = write_demo(tmp_path, frames=250, box=None)
        t0 = time.perf_counter()
        _cli("ablate-collisions", "--config", cfg_path)
        elapsed = time.perf_counter() - t0
        report = json.loads((load_run_config(cfg_path).output / "ablation.json").read_text())
        on, off = report["with_handling"], report["without_handling"]
        assert on["count"] > 0, "no particle came to rest"
        assert on["max_offset_error"] <= 1e-4, f"offset error {on['max_offset_error']:.3g}"
        assert off["mean_distance"] > on["mean_distance"], "unhandled splats are not farther from the mesh"
        assert elapsed < 300.0, f"took {elapsed:.0f}s"
        return (f"{on['count']} rest splats, offset error {on['max_offset_error']:.1e}, mean distance "
                f"{on['mean_distance']:.4f} vs {off['mean_distance']:.4f} unhandled, {elapsed:.0f}s")

    criterion(7, "collision handling ablation", check)


def test_c08_wetness_laws(criterion):
    def check():
        rng = np.random.default_rng(108)
        grid = WetnessGrid.around(np.zeros(3), np.ones(3), 64, 0.95)
        worst = 0.0
        for k, p in enumerate(rng.uniform(-0.02, 1.02, (200, 3)), 1):
            splat_wetness(grid, p)
            worst = max(worst, abs(grid.total() - k))
        assert worst <= 1e-6, f"impact total error {worst:.3g}"
        total = grid.total()
        decay_err = 0.0
        for k in range(1, 51):
            decay_wetness(grid)
            decay_err = max(decay_err, abs(grid.total() / (total * 0.95 ** k) - 1.0))
        assert decay_err <= 1e-12, f"decay error {decay_err:.3g}"
        colors = rng.uniform(size=(5000, 3))
        same = apply_wetness_to_scene(colors, rng.uniform(size=(5000, 3)), WetnessGrid.around(np.zeros(3), np.ones(3), 64))
        assert same.tobytes() == colors.tobytes(), "dry grid changed colors"
        return f"impact error {worst:.1e}, decay error {decay_err:.1e}, dry colors bitwise equal"

    criterion(8, "wetness laws", check)


def test_c09_determinism(criterion, tmp_path):
    def check():
        hashes = []
        for run in ("a", "b"):
            cfg_path = write_demo(tmp_path / run, frames=30, width=160, height=120)
            _cli("simulate", "--config", cfg_path, "--quiet")
            _cli("render", "--config", cfg_path, "--frames", "27..29")
            out = load_run_config(cfg_path).output
            states = [file_digest(frame_path(out / "frames", f)) for f in range(30)]
            pngs = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted((out / "renders").rglob("*.png"))}
            hashes.append((states, pngs))
        (sa, pa), (sb, pb) = hashes
        assert sa == sb, "frame-state hashes differ"
        assert pa.keys() == pb.keys() and len(pa) == 6
        assert all(pa[k] == pb[k] for k in pa), "PNG bytes differ"
        return f"30 frame states and {len(pa)} PNGs identical"

    criterion(9, "determinism", check)


def test_c10_asset_alignment(criterion):
    def check():
        rng = np.random.default_rng(110)
        n = 10_000
        splats = Splats(rng.normal(size=(n, 3)), random_quats(rng, n), rng.uniform(0.01, 0.1, (n, 3)),
                        rng.uniform(0.1, 1.0, n), colors=rng.uniform(size=(n, 3)))
        ref_q = random_quats(rng, 1)[0]
        asset = AssetGaussians(splats, rng.normal(size=3), ref_q)
        q = random_quats(rng, 1)[0]
        scale = 0.37
        out = align_asset(asset, np.array([0.2, -1.0, 3.0]), q, scale)
        worst = 0.0
        for a in range(0, n, 500):
            d0 = np.linalg.norm(splats.positions[a:a + 500, None] - splats.positions[None], axis=-1)
            d1 = np.linalg.norm(out.positions[a:a + 500, None] - out.positions[None], axis=-1)
            worst = max(worst, np.abs(d1 - scale * d0).max())
        assert worst <= 1e-6, f"distance error {worst:.3g}"
        delta = Rotation.from_quat(np.roll(q, -1)) * Rotation.from_quat(np.roll(ref_q, -1)).inv()
        expect = (delta * Rotation.from_quat(np.roll(splats.rotations, -1, axis=1))).as_matrix()
        got = Rotation.from_quat(np.roll(out.rotations, -1, axis=1)).as_matrix()
        rot_err = np.abs(got - expect).max()
        pos_err = np.abs(out.positions - (np.array([0.2, -1.0, 3.0])
                                          + scale * delta.apply(splats.positions - asset.reference_point))).max()
        assert rot_err <= 1e-6 and pos_err <= 1e-6, f"rotation {rot_err:.3g}, position {pos_err:.3g}"
        return f"pairwise error {worst:.1e}, rotation error {rot_err:.1e}, position error {pos_err:.1e}"

    criterion(10, "asset alignment", check)


def test_c11_performance_envelope(criterion, tmp_path):
    def check():
        cfg_path = write_demo(tmp_path, frames=250, views=2, width=640, height=480)
        t0 = time.perf_counter()
        _cli("simulate", "--config", cfg_path, "--parallel", "--quiet")
        t_sim = time.perf_counter() - t0
        _cli("render", "--config", cfg_path, "--parallel", "--frames", "245..249")
        elapsed = time.perf_counter() - t0
        out = load_run_config(cfg_path).output
        summary = json.loads((out / "run.json").read_text())["summary"]
        assert summary["totals"]["emitted"] <= 125_000
        assert len(list((out / "renders").rglob("*.png"))) == 10
        assert elapsed < 900.0, f"took {elapsed:.0f}s"
        return (f"{summary['totals']['emitted']} particles, simulate {t_sim:.0f}s, "
                f"10 renders {elapsed - t_sim:.0f}s, total {elapsed:.0f}s")

    criterion(11, "desk-scale performance", check)
