import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gsweather.effects import (
    EFFECT_NAMES,
    AssetGaussians,
    align_asset,
    apply_overrides,
    canonical_name,
    dynamic_scales,
    override_keys,
    particles_to_gaussians,
    place_emitter,
    preset,
    preset_table,
)
from gsweather.gaussian_core import Splats, matrix_from_quaternion
from gsweather.mpm import ConfigError, Material, ParticleState, emit
from gsweather.scene_io import SimTransform
from golden import GOLDEN
from helpers import random_quats


def _get(p, key):
    head, _, tail = key.partition(".")
    obj = getattr(p, head)
    return getattr(obj, tail) if tail else obj


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_table(name):
    p = preset(name)
    for key, value in GOLDEN[name].items():
        assert _get(p, key) == value, f"{name}.{key}"


def test_velocity_ranges_match_stated_intervals():
    sand = place_emitter(preset("sandstorm"), np.zeros(3), np.ones(3))
    b = emit(sand, 0, np.random.default_rng(0))
    assert b.velocities[:, 0].min() >= 0.8 and b.velocities[:, 0].max() <= 1.2
    assert b.velocities[:, 1].min() >= -0.2 and b.velocities[:, 1].max() <= 0.2
    leaves = emit(place_emitter(preset("leaves"), np.zeros(3), np.ones(3)), 0, np.random.default_rng(0))
    assert len(leaves) == 7
    assert leaves.velocities[:, 1].min() >= -0.2 and leaves.velocities[:, 1].max() <= -0.1


def test_every_effect_has_a_preset():
    for name in EFFECT_NAMES:
        p = preset(name)
        p.validate()
        assert p.name == name


def test_aliases():
    assert canonical_name("Snow") == "snowfall"
    assert canonical_name("rigid-object") == "rigid_object"
    with pytest.raises(ConfigError):
        canonical_name("hail")


def test_preset_is_a_fresh_copy():
    a = preset("snowfall")
    a.emitter.count = 3
    assert preset("snowfall").emitter.count == 1000


def test_sand_emitter_on_side_face():
    e = place_emitter(preset("sandstorm"), np.array([0.1, 0.02, 0.2]), np.array([0.9, 0.5, 0.8]))
    assert e.region_min[0] == e.region_max[0] == 0.02
    assert (e.region_min[1], e.region_max[1]) == (0.1, 0.6)
    assert (e.region_min[2], e.region_max[2]) == (0.2, 0.8)


def test_snow_emitter_above_scene():
    e = place_emitter(preset("snowfall"), np.array([0.1, 0.02, 0.2]), np.array([0.9, 0.5, 0.8]))
    assert e.region_min == (0.1, 0.95, 0.2) and e.region_max == (0.9, 0.95, 0.8)


# ---------------------------------------------------------------------------
# overrides
# ---------------------------------------------------------------------------

def test_overrides_and_provenance():
    p, prov = apply_overrides(preset("fog"), {"render_color": [0.5, 0.6, 0.7], "emitter.count": 10,
                                              "render_scale": 0.1})
    assert p.render_color == (0.5, 0.6, 0.7)
    assert p.emitter.count == 10
    assert p.render_scale == (0.1, 0.1, 0.1)
    rows = {k: (v, s) for k, v, s in preset_table(p, prov)}
    assert rows["emitter.count"] == ("10", "override")
    assert rows["render_opacity"] == ("0.08", "default")


def test_unknown_override_rejected():
    for bad in ({"colour": 1}, {"emitter.speed": 1}, {"clone.scale": 1.0}):
        with pytest.raises(ConfigError):
            apply_overrides(preset("snowfall"), bad)


def test_invalid_override_value_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(preset("snowfall"), {"render_opacity": 2.0})
    with pytest.raises(ConfigError):
        apply_overrides(preset("snowfall"), {"emitter.count": 2.5})


@pytest.mark.parametrize("name", EFFECT_NAMES)
def test_every_numeric_field_is_overridable_and_listed(name):
    p = preset(name)
    keys = {k for k, _, _ in preset_table(p)}
    for key in override_keys(p):
        head = key.partition(".")[0]
        if getattr(p, head) is None and "." in key:
            continue
        value = _get(p, key)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            assert key in keys


# ---------------------------------------------------------------------------
# particles to Gaussians
# ---------------------------------------------------------------------------

def _particles(n, material=Material.SNOW, u=None):
    ps = ParticleState()
    ps.append(np.random.default_rng(0).uniform(0.2, 0.8, (n, 3)), np.zeros((n, 3)), material, 0, u)
    return ps


def test_single_snow_particle():
    t = SimTransform(0.5, (0.5, 0.02, 0.5))
    s = particles_to_gaussians(_particles(1), preset("snowfall"), 0, t)
    assert len(s) == 1
    np.testing.assert_allclose(s.scales[0] * t.scale, [0.005] * 3)
    assert s.opacities[0] == 0.65
    np.testing.assert_allclose(s.rotations[0], [1, 0, 0, 0])
    np.testing.assert_allclose(t.to_sim(s.positions), _particles(1).x)


def test_no_particles_no_splats():
    ps = ParticleState()
    assert len(particles_to_gaussians(ps, preset("snowfall"), 0, SimTransform.identity())) == 0


def test_sand_yields_clones():
    p = preset("sandstorm")
    ps = _particles(50, Material.SAND, np.linspace(0, 1, 50))
    s = particles_to_gaussians(ps, p, 3, SimTransform.identity(), seed=1)
    assert len(s) == 100
    off = np.linalg.norm(s.positions[50:] - s.positions[:50], axis=1)
    assert off.min() >= 0.001 - 1e-12 and off.max() <= 0.005 + 1e-12
    np.testing.assert_allclose(s.scales[50:], 0.035)
    np.testing.assert_allclose(s.opacities[50:], 0.15)
    np.testing.assert_allclose(s.scales[:50, 0], 0.0025 + 0.0005 * np.linspace(0, 1, 50))
    again = particles_to_gaussians(ps, p, 3, SimTransform.identity(), seed=1)
    np.testing.assert_array_equal(again.positions, s.positions)


def test_inactive_particles_skipped():
    ps = _particles(5)
    ps.active[1:3] = False
    assert len(particles_to_gaussians(ps, preset("snowfall"), 0, SimTransform.identity())) == 3


def test_dynamic_scales_ranged():
    p = preset("sandstorm")
    np.testing.assert_allclose(dynamic_scales(p, np.array([0.0, 1.0]))[:, 0], [0.0025, 0.003])


# ---------------------------------------------------------------------------
# asset alignment
# ---------------------------------------------------------------------------

def _asset(rng, n=200):
    s = Splats(rng.normal(size=(n, 3)), random_quats(rng, n), rng.uniform(0.01, 0.1, (n, 3)),
               rng.uniform(0.1, 1, n), colors=rng.uniform(size=(n, 3)))
    return AssetGaussians(s, reference_point=rng.normal(size=3))


def test_identity_pose_unchanged(rng):
    a = _asset(rng)
    out = align_asset(a, a.reference_point, np.array([1.0, 0, 0, 0]), 1.0)
    np.testing.assert_allclose(out.positions, a.splats.positions, atol=1e-12)
    np.testing.assert_allclose(out.rotations, a.splats.rotations, atol=1e-12)
    np.testing.assert_array_equal(out.scales, a.splats.scales)


def test_pure_translation(rng):
    a = _asset(rng)
    shift = np.array([0.3, -1.0, 2.0])
    out = align_asset(a, a.reference_point + shift, np.array([1.0, 0, 0, 0]), 1.0)
    np.testing.assert_allclose(out.positions - a.splats.positions, np.broadcast_to(shift, (200, 3)), atol=1e-12)
    np.testing.assert_allclose(out.rotations, a.splats.rotations, atol=1e-12)


def test_rotation_vs_per_splat_oracle(rng):
    a = _asset(rng)
    q = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])  # 90 degrees about y
    pos = np.array([1.0, 2.0, 3.0])
    out = align_asset(a, pos, q, 2.0)
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]])
    for i in range(len(a.splats)):
        ref_pos = pos + 2.0 * R.apply(a.splats.positions[i] - a.reference_point)
        np.testing.assert_allclose(out.positions[i], ref_pos, atol=1e-6)
        r_i = R * Rotation.from_quat(np.roll(a.splats.rotations[i], -1))
        np.testing.assert_allclose(matrix_from_quaternion(out.rotations[i]), r_i.as_matrix(), atol=1e-6)


def test_reference_orientation_is_replaced(rng):
    a = _asset(rng)
    ref = random_quats(rng, 1)[0]
    a = AssetGaussians(a.splats, a.reference_point, ref)
    out = align_asset(a, np.zeros(3), ref, 1.0)
    np.testing.assert_allclose(out.positions, a.splats.positions - a.reference_point, atol=1e-12)


def test_bottom_centered_reference(rng):
    a = AssetGaussians.bottom_centered(_asset(rng).splats)
    lo, hi = a.splats.positions.min(0), a.splats.positions.max(0)
    np.testing.assert_allclose(a.reference_point, [(lo[0] + hi[0]) / 2, lo[1], (lo[2] + hi[2]) / 2])
