"""On-disk formats: depth maps, trajectories, the flow cache and PLY clouds.

Every writer is deterministic and every reader returns exactly what the
writer needs to reproduce its input byte for byte. Binary layouts are
little-endian and start with a four-byte magic and a u16 version.
"""

import math
import os
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError
from .frames import FlowObservation, FrameId
from .geometry import PoseSE3

DEPTH_MAGIC = b"MCRD"
DEPTH_VERSION = 1
_DEPTH_HEADER = struct.Struct("<4sHII")

FLOW_MAGIC = b"MCRF"
FLOW_VERSION = 1
_FLOW_HEADER = struct.Struct("<4sHI")
_FLOW_RECORD = struct.Struct("<6I")

QUAT_TOL = 1e-6
TRAJECTORY_HEADER = "# timestamp tx ty tz qx qy qz qw"


def _write_atomic(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _read(path):
    return Path(path).read_bytes()


def _pack_mask(mask):
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little").tobytes()


def _unpack_mask(raw, n):
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little").astype(bool)


# ------------------------------------------------------------------ depth


def encode_depth(depth, valid=None):
    """Serialise a depth map.

    Pixels outside ``valid`` (by default: non-finite or non-positive depth)
    are stored as 0.0 in the payload and clear in the mask, so the encoding
    of a decoded map is identical to the original encoding.
    """
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise ValueError("depth must be a 2-D array")
    with np.errstate(over="ignore", invalid="ignore"):
        stored = depth.astype("<f4")
    # validity is judged after narrowing, so values that under/overflow float32 drop out
    ok = np.isfinite(stored) & (stored > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    H, W = depth.shape
    payload = np.where(ok, stored, np.float32(0.0)).astype("<f4")
    return _DEPTH_HEADER.pack(DEPTH_MAGIC, DEPTH_VERSION, H, W) + payload.tobytes() + _pack_mask(ok)


def decode_depth(data, path="<bytes>"):
    """Inverse of :func:`encode_depth`: ``(depth, valid)`` with inf outside ``valid``."""
    n_head = _DEPTH_HEADER.size
    if len(data) < n_head:
        raise FormatError(path, f"truncated header: expected {n_head} bytes, found {len(data)}", len(data))
    magic, version, H, W = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}", 0)
    if version != DEPTH_VERSION:
        raise FormatError(path, f"unsupported version {version}", 4)
    n = H * W
    n_mask = (n + 7) // 8
    expected = n_head + 4 * n + n_mask
    if len(data) < expected:
        raise FormatError(
            path,
            f"truncated depth file for {H}x{W}: expected {expected} bytes "
            f"({4 * n} payload + {n_mask} mask), found {len(data)}",
            len(data),
        )
    if len(data) > expected:
        raise FormatError(path, f"{len(data) - expected} trailing bytes after mask", expected)
    payload = np.frombuffer(data, dtype="<f4", count=n, offset=n_head)
    mask_raw = data[n_head + 4 * n:]
    if n % 8 and mask_raw[-1] >> (n % 8):
        raise FormatError(path, "non-zero padding bits in validity mask", expected - 1)
    valid = _unpack_mask(mask_raw, n).reshape(H, W)
    depth = payload.astype(float).reshape(H, W)
    bad = valid & ~(np.isfinite(depth) & (depth > 0))
    if bad.any():
        k = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(path, "valid pixel with non-positive or non-finite depth", n_head + 4 * k)
    return np.where(valid, depth, np.inf), valid


def write_depth(path, depth, valid=None):
    _write_atomic(path, encode_depth(depth, valid))


def read_depth(path):
    return decode_depth(_read(path), path)


# ------------------------------------------------------------------ trajectories


class PoseRecord(NamedTuple):
    """One trajectory line. The quaternion is kept as written (x, y, z, w)."""

    timestamp: float
    translation: tuple
    quaternion: tuple

    @classmethod
    def from_pose(cls, timestamp, pose):
        q = Rotation.from_matrix(pose.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return cls(float(timestamp), tuple(float(v) for v in pose.translation), tuple(float(v) for v in q))

    def pose(self):
        R = Rotation.from_quat(self.quaternion).as_matrix()
        return PoseSE3(R, np.array(self.translation, dtype=float))


def format_trajectory(records):
    lines = [TRAJECTORY_HEADER]
    last = -math.inf
    for r in records:
        if not r.timestamp > last:
            raise ValueError(f"timestamps must be strictly increasing (got {r.timestamp!r} after {last!r})")
        last = r.timestamp
        norm = math.sqrt(sum(q * q for q in r.quaternion))
        if abs(norm - 1.0) > QUAT_TOL:
            raise ValueError(f"quaternion norm {norm!r} is not within {QUAT_TOL} of 1")
        values = (r.timestamp, *r.translation, *r.quaternion)
        lines.append(" ".join(repr(float(v)) for v in values))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_trajectory(data, path="<bytes>"):
    records = []
    offset = 0
    last = -math.inf
    for raw in data.splitlines(keepends=True):
        start = offset
        offset += len(raw)
        try:
            line = raw.decode("utf-8").strip()
        except UnicodeDecodeError:
            raise FormatError(path, "line is not valid UTF-8", start) from None
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise FormatError(path, f"expected 8 fields, found {len(fields)}", start)
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise FormatError(path, f"non-numeric field in {line!r}", start) from None
        if not all(math.isfinite(v) for v in values):
            raise FormatError(path, "non-finite value", start)
        ts, q = values[0], tuple(values[4:])
        norm = math.sqrt(sum(v * v for v in q))
        if abs(norm - 1.0) > QUAT_TOL:
            raise FormatError(path, f"quaternion norm {norm!r} deviates from 1 by more than {QUAT_TOL}", start)
        if not ts > last:
            raise FormatError(path, f"timestamp {ts!r} does not increase (previous {last!r})", start)
        last = ts
        records.append(PoseRecord(ts, tuple(values[1:4]), q))
    return records


def write_trajectory(path, records):
    _write_atomic(path, format_trajectory(records))


def read_trajectory(path):
    return parse_trajectory(_read(path), path)


def trajectory_records(poses, camera, fps):
    """Records for one camera from a ``{FrameId: PoseSE3}`` map; time = index / fps."""
    frames = sorted(f for f in poses if FrameId(*f).camera == camera)
    return [PoseRecord.from_pose(FrameId(*f).time / fps, poses[f]) for f in frames]


# ------------------------------------------------------------------ flow cache


def encode_flows(flows):
    """Serialise ``{(src, dst): FlowObservation}``; records are sorted by key."""
    keys = sorted((FrameId(*s), FrameId(*d)) for s, d in flows)
    parts = [_FLOW_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, len(keys))]
    for s, d in keys:
        obs = flows[(s, d)]
        H, W = obs.mask.shape
        parts.append(_FLOW_RECORD.pack(s.camera, s.time, d.camera, d.time, H, W))
        parts.append(np.ascontiguousarray(obs.flow, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(obs.weight, dtype="<f8").tobytes())
        parts.append(_pack_mask(obs.mask))
    return b"".join(parts)


def decode_flows(data, path="<bytes>"):
    if len(data) < _FLOW_HEADER.size:
        raise FormatError(path, f"truncated header: expected {_FLOW_HEADER.size} bytes, found {len(data)}", len(data))
    magic, version, count = _FLOW_HEADER.unpack_from(data)
    if magic != FLOW_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {FLOW_MAGIC!r}", 0)
    if version != FLOW_VERSION:
        raise FormatError(path, f"unsupported version {version}", 4)
    pos = _FLOW_HEADER.size
    flows = {}
    prev = None
    for _ in range(count):
        if len(data) < pos + _FLOW_RECORD.size:
            raise FormatError(path, "truncated record header", pos)
        sc, st, dc, dt, H, W = _FLOW_RECORD.unpack_from(data, pos)
        key = (FrameId(sc, st), FrameId(dc, dt))
        if prev is not None and key <= prev:
            raise FormatError(path, f"record {key} out of order", pos)
        prev = key
        n = H * W
        size = 24 * n + (n + 7) // 8
        body = pos + _FLOW_RECORD.size
        if len(data) < body + size:
            raise FormatError(path, f"truncated record {key}: expected {size} bytes, found {len(data) - body}", body)
        flow = np.frombuffer(data, "<f8", 2 * n, body).reshape(H, W, 2).astype(float)
        weight = np.frombuffer(data, "<f8", n, body + 16 * n).reshape(H, W).astype(float)
        mask = _unpack_mask(data[body + 24 * n: body + size], n).reshape(H, W)
        flows[key] = FlowObservation(flow, weight, mask)
        pos = body + size
    if pos != len(data):
        raise FormatError(path, f"{len(data) - pos} trailing bytes", pos)
    return flows


def write_flows(path, flows):
    _write_atomic(path, encode_flows(flows))


def read_flows(path):
    return decode_flows(_read(path), path)


class CachedFlow:
    """Flow provider that serves cached edges and falls back to ``source``.

    New edges are memoised in ``flows`` so the caller can persist them.
    """

    def __init__(self, flows, source=None):
        self.flows = dict(flows)
        self.source = source

    def flow(self, src, dst):
        key = (FrameId(*src), FrameId(*dst))
        if key not in self.flows:
            if self.source is None:
                raise KeyError(f"flow {key[0]}->{key[1]} is not cached")
            self.flows[key] = self.source.flow(*key)
        return self.flows[key]


# ------------------------------------------------------------------ point clouds


def encode_ply(points):
    points = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3), dtype="<f8")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    return header.encode("ascii") + points.tobytes()


def decode_ply(data, path="<bytes>"):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(path, "missing PLY header", 0)
    body = end + len(b"end_header\n")
    n = None
    for line in data[:end].decode("ascii").splitlines():
        parts = line.split()
        if parts[:1] == ["format"] and parts[1:2] != ["binary_little_endian"]:
            raise FormatError(path, f"unsupported PLY format {line!r}", 0)
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
    if n is None:
        raise FormatError(path, "no vertex element", 0)
    if len(data) - body != 24 * n:
        raise FormatError(path, f"expected {24 * n} bytes of vertex data, found {len(data) - body}", body)
    return np.frombuffer(data, "<f8", 3 * n, body).reshape(n, 3).astype(float)


def write_ply(path, points):
    _write_atomic(path, encode_ply(points))


def read_ply(path):
    return decode_ply(_read(path), path)


__all__ = [
    "PoseRecord",
    "CachedFlow",
    "encode_depth",
    "decode_depth",
    "write_depth",
    "read_depth",
    "format_trajectory",
    "parse_trajectory",
    "write_trajectory",
    "read_trajectory",
    "trajectory_records",
    "encode_flows",
    "decode_flows",
    "write_flows",
    "read_flows",
    "encode_ply",
    "decode_ply",
    "write_ply",
    "read_ply",
]
