"""Per-frame persistence of dynamic and accumulated splats plus the wetness field.

File layout (all little-endian)::

    magic  b"GSWF"
    u32    version
    u32    flags            bit 0: body is zlib-compressed
    i64    frame, active_count, n_dynamic, n_accumulated, wetness_res (0 = none)
    f64    wetness origin[3], wetness cell, wetness decay
    body   dynamic records      n_dynamic x 14 f32 (pos 3, quat 4, scale 3, opacity, rgb 3)
           accumulated records  n_accumulated x 14 f32, then birth frames i64, event ids i64
           wetness values       res^3 f32 (C order)

Splat arrays are held as float32 so a save/load cycle is bitwise exact.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .collision import AccumulatedSplats, WetnessGrid
from .gaussian_core import Splats

MAGIC = b"GSWF"
VERSION = 1
FLAG_ZLIB = 1
_HEAD = struct.Struct("<4sII5q5d")
_REC = 14


class FrameStateError(ValueError):
    pass


def _f32_splats(s: Splats) -> Splats:
    f = np.float32
    return Splats(s.positions.astype(f), s.rotations.astype(f), s.scales.astype(f), s.opacities.astype(f),
                  colors=s.colors.astype(f))


@dataclass
class FrameState:
    frame: int
    dynamic: Splats
    accumulated: AccumulatedSplats
    wetness: WetnessGrid | None = None
    active_count: int = 0

    def __post_init__(self) -> None:
        if self.dynamic.colors is None or self.accumulated.splats.colors is None:
            raise FrameStateError("frame states hold flat-colour splats only")
        self.dynamic = _f32_splats(self.dynamic)
        acc = self.accumulated
        self.accumulated = AccumulatedSplats(_f32_splats(acc.splats), np.asarray(acc.birth_frames, np.int64),
                                             np.asarray(acc.event_ids, np.int64))
        if len(self.accumulated.birth_frames) != len(self.accumulated.splats):
            raise FrameStateError("birth frame count does not match accumulated splats")
        if self.wetness is not None:
            w = self.wetness
            self.wetness = WetnessGrid(w.origin, w.cell, w.res, w.decay, w.values.astype(np.float32))


def _records(s: Splats) -> np.ndarray:
    return np.concatenate([s.positions, s.rotations, s.scales, s.opacities[:, None], s.colors],
                          axis=1).astype("<f4")


def _splats(rec: np.ndarray) -> Splats:
    rec = rec.astype(np.float32)
    return Splats(rec[:, 0:3].copy(), rec[:, 3:7].copy(), rec[:, 7:10].copy(), rec[:, 10].copy(),
                  colors=rec[:, 11:14].copy())


def encode_frame_state(state: FrameState, compress: bool = True) -> bytes:
    w = state.wetness
    res = 0 if w is None else w.res
    origin = (0.0, 0.0, 0.0) if w is None else tuple(float(x) for x in w.origin)
    cell = 0.0 if w is None else w.cell
    decay = 0.0 if w is None else w.decay
    acc = state.accumulated
    parts = [
        _records(state.dynamic).tobytes(),
        _records(acc.splats).tobytes(),
        acc.birth_frames.astype("<i8").tobytes(),
        acc.event_ids.astype("<i8").tobytes(),
    ]
    if w is not None:
        parts.append(np.ascontiguousarray(w.values, dtype="<f4").tobytes())
    body = b"".join(parts)
    flags = 0
    if compress:
        body = zlib.compress(body, 6)
        flags |= FLAG_ZLIB
    head = _HEAD.pack(MAGIC, VERSION, flags, state.frame, state.active_count, len(state.dynamic), len(acc), res,
                      *origin, cell, decay)
    return head + body


def decode_frame_state(data: bytes, source: str = "<bytes>") -> FrameState:
    if len(data) < _HEAD.size:
        raise FrameStateError(f"{source}: truncated header")
    magic, version, flags, frame, active, nd, na, res, ox, oy, oz, cell, decay = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FrameStateError(f"{source}: not a frame-state file (bad magic)")
    if version != VERSION:
        raise FrameStateError(f"{source}: unsupported frame-state version {version}")
    body = data[_HEAD.size:]
    if flags & FLAG_ZLIB:
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise FrameStateError(f"{source}: corrupt compressed body: {exc}") from exc
    need = 4 * _REC * (nd + na) + 16 * na + 4 * res ** 3
    if len(body) != need:
        raise FrameStateError(f"{source}: body has {len(body)} bytes, header implies {need}")
    off = 0
    dyn = np.frombuffer(body, "<f4", nd * _REC, off).reshape(nd, _REC)
    off += 4 * nd * _REC
    acc = np.frombuffer(body, "<f4", na * _REC, off).reshape(na, _REC)
    off += 4 * na * _REC
    birth = np.frombuffer(body, "<i8", na, off).astype(np.int64)
    off += 8 * na
    ids = np.frombuffer(body, "<i8", na, off).astype(np.int64)
    off += 8 * na
    wet = None
    if res:
        vals = np.frombuffer(body, "<f4", res ** 3, off).reshape(res, res, res).astype(np.float32)
        wet = WetnessGrid((ox, oy, oz), cell, res, decay, vals)
    return FrameState(frame, _splats(dyn), AccumulatedSplats(_splats(acc), birth, ids), wet, active)


def write_frame_state(state: FrameState, path: str | Path, compress: bool = True) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_frame_state(state, compress))
    except OSError as exc:
        raise OSError(f"cannot write frame state {path}: {exc}") from exc


def read_frame_state(path: str | Path) -> FrameState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read frame state {path}: {exc}") from exc
    return decode_frame_state(data, str(path))


def frame_path(directory: str | Path, frame: int) -> Path:
    return Path(directory) / f"frame_{frame:05d}.gsw"
