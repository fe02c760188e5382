import numpy as np
import pytest

from gsweather.collision import AccumulatedSplats, WetnessGrid
from gsweather.frame_state import (
    FrameState,
    FrameStateError,
    decode_frame_state,
    encode_frame_state,
    frame_path,
    read_frame_state,
    write_frame_state,
)
from gsweather.gaussian_core import Splats
from helpers import random_flat_splats


def _state(rng, nd=30, na=12, wet=True):
    acc = AccumulatedSplats(random_flat_splats(rng, na), rng.integers(0, 50, na), rng.integers(0, 10 ** 6, na))
    grid = None
    if wet:
        grid = WetnessGrid((0.1, -0.2, 0.3), 0.05, 8, 0.9)
        grid.values[:] = rng.uniform(size=(8, 8, 8))
    return FrameState(17, random_flat_splats(rng, nd), acc, grid, active_count=nd + 3)


def _same(a, b):
    assert (a.frame, a.active_count) == (b.frame, b.active_count)
    for x, y in ((a.dynamic, b.dynamic), (a.accumulated.splats, b.accumulated.splats)):
        for name in ("positions", "rotations", "scales", "opacities", "colors"):
            np.testing.assert_array_equal(getattr(x, name), getattr(y, name))
    np.testing.assert_array_equal(a.accumulated.birth_frames, b.accumulated.birth_frames)
    np.testing.assert_array_equal(a.accumulated.event_ids, b.accumulated.event_ids)
    if a.wetness is None:
        assert b.wetness is None
    else:
        np.testing.assert_array_equal(a.wetness.values, b.wetness.values)
        np.testing.assert_array_equal(a.wetness.origin, b.wetness.origin)
        assert (a.wetness.cell, a.wetness.res, a.wetness.decay) == (b.wetness.cell, b.wetness.res, b.wetness.decay)


@pytest.mark.parametrize("compress", [True, False])
@pytest.mark.parametrize("wet", [True, False])
def test_round_trip(rng, compress, wet):
    s = _state(rng, wet=wet)
    _same(s, decode_frame_state(encode_frame_state(s, compress)))


def test_empty_state_round_trip():
    s = FrameState(0, Splats.empty(), AccumulatedSplats.empty())
    back = decode_frame_state(encode_frame_state(s))
    assert len(back.dynamic) == 0 and len(back.accumulated) == 0 and back.wetness is None


def test_encoding_is_deterministic(rng):
    s = _state(rng)
    assert encode_frame_state(s) == encode_frame_state(s)


def test_file_round_trip(tmp_path, rng):
    s = _state(rng)
    p = frame_path(tmp_path, 17)
    assert p.name == "frame_00017.gsw"
    write_frame_state(s, p)
    _same(s, read_frame_state(p))


def test_bad_magic():
    with pytest.raises(FrameStateError, match="magic"):
        decode_frame_state(b"XXXX" + bytes(200))


def test_truncated(rng):
    data = encode_frame_state(_state(rng), compress=False)
    with pytest.raises(FrameStateError):
        decode_frame_state(data[:-7])
    with pytest.raises(FrameStateError):
        decode_frame_state(data[:10])


def test_corrupt_compressed_body(rng):
    data = bytearray(encode_frame_state(_state(rng)))
    data[-20:] = bytes(20)
    with pytest.raises(FrameStateError):
        decode_frame_state(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_frame_state(tmp_path / "nope.gsw")


def test_sh_splats_rejected(rng):
    s = random_flat_splats(rng, 2)
    sh_only = Splats(s.positions, s.rotations, s.scales, s.opacities, sh=np.zeros((2, 1, 3)))
    with pytest.raises(FrameStateError):
        FrameState(0, sh_only, AccumulatedSplats.empty())


def test_birth_frame_mismatch(rng):
    with pytest.raises(FrameStateError):
        FrameState(0, Splats.empty(), AccumulatedSplats(random_flat_splats(rng, 3), np.zeros(2), np.zeros(3)))
