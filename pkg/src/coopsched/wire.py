"""Byte layouts for the two exchanged message kinds.

Control channel: 4-bit quantized sparse utility maps. Data channel: sparse
feature payloads with FP8 E4M3 scalars. Both share a 22-byte little-endian
header. ``WIRE.md`` at the repository root is the normative description.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError
from .grid import GridSpec, MetaUtilityMap, SparseFeatureMap

MAGIC = b"JGSW"
VERSION = 1
MSG_UTILITY = 0
MSG_FEATURES = 1

HEADER = struct.Struct("<4sBBHIHHHI")
HEADER_BYTES = HEADER.size
ENTRY_INDEX_BYTES = 4
FP8_BYTES = 1
UTILITY_PARAMS_BYTES = 8
UTILITY_LEVELS = 15

_HEADER_FIELDS = (
    ("magic", 0, 4), ("version", 4, 5), ("msg_type", 5, 6), ("agent_id", 6, 8),
    ("frame_id", 8, 12), ("h", 12, 14), ("w", 14, 16), ("c", 16, 18), ("entry_count", 18, 22),
)

# ---------------------------------------------------------------------------
# FP8 E4M3 (no infinities, NaN = 0x7F / 0xFF, max normal 448)
# ---------------------------------------------------------------------------

FP8_MAX = 448.0
FP8_NAN = 0x7F


def _build_fp8_table():
    codes = np.arange(256)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    exp = (codes >> 3) & 0xF
    man = codes & 0x7
    mag = np.where(exp == 0, man / 8.0 * 2.0**-6, (1.0 + man / 8.0) * 2.0 ** (exp - 7.0))
    table = sign * mag
    table[(exp == 15) & (man == 7)] = np.nan
    return table


FP8_TABLE = _build_fp8_table()
_FP8_POSITIVE = FP8_TABLE[:0x7F]


def fp8_encode(x):
    """Round-to-nearest-even into E4M3 bytes; saturates at +-448, NaN -> 0x7F."""
    x = np.asarray(x, dtype=np.float64)
    a = np.minimum(np.abs(x), FP8_MAX)
    hi = np.searchsorted(_FP8_POSITIVE, a, side="left")
    hi = np.minimum(hi, _FP8_POSITIVE.size - 1)
    lo = np.maximum(hi - 1, 0)
    d_hi = _FP8_POSITIVE[hi] - a
    d_lo = a - _FP8_POSITIVE[lo]
    pick_lo = (d_lo < d_hi) | ((d_lo == d_hi) & (lo % 2 == 0) & (lo != hi))
    code = np.where(pick_lo, lo, hi).astype(np.uint8)
    code = code | np.where(np.signbit(x), 0x80, 0).astype(np.uint8)
    code = np.where(np.isnan(x), FP8_NAN, code).astype(np.uint8)
    return code if code.ndim else int(code)


def fp8_decode(b):
    b = np.asarray(b, dtype=np.uint8)
    out = FP8_TABLE[b]
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MessageHeader:
    msg_type: int
    agent_id: int
    frame_id: int
    h: int
    w: int
    c: int
    entry_count: int

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.msg_type, self.agent_id, self.frame_id,
                           self.h, self.w, self.c, self.entry_count)

    def grid(self, cell_size: float = GridSpec.cell_size) -> GridSpec:
        return GridSpec(self.h, self.w, self.c, cell_size)


def _header_for(grid, msg_type, agent_id, frame_id, n):
    return MessageHeader(msg_type, agent_id, frame_id, grid.h, grid.w, grid.c, n)


def _unpack_header(data, offset):
    avail = len(data) - offset
    if avail < HEADER_BYTES:
        for name, start, stop in _HEADER_FIELDS:
            if avail < stop:
                raise DecodeError("truncated header", offset + min(start, avail), name)
    magic, version, msg_type, agent_id, frame_id, h, w, c, n = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", offset, "magic")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", offset + 4, "version")
    if msg_type not in (MSG_UTILITY, MSG_FEATURES):
        raise DecodeError(f"unknown message type {msg_type}", offset + 5, "msg_type")
    for name, value, start in (("h", h, 12), ("w", w, 14), ("c", c, 16)):
        if value == 0:
            raise DecodeError(f"grid dimension {name} is zero", offset + start, name)
    if n > h * w:
        raise DecodeError(f"entry_count {n} exceeds {h * w} cells", offset + 18, "entry_count")
    return MessageHeader(msg_type, agent_id, frame_id, h, w, c, n)


def _need(data, pos, size, field):
    if len(data) - pos < size:
        raise DecodeError(f"truncated payload: {field} needs {size} bytes, "
                          f"{max(len(data) - pos, 0)} available", pos, field)


def _read_cells(data, pos, header):
    size = ENTRY_INDEX_BYTES * header.entry_count
    _need(data, pos, size, "cell_indices")
    cells = np.frombuffer(data, dtype="<u4", count=header.entry_count, offset=pos).astype(np.int64)
    if cells.size:
        bad = np.flatnonzero(np.diff(cells) <= 0)
        if bad.size:
            k = int(bad[0]) + 1
            raise DecodeError("cell indices not strictly increasing", pos + 4 * k, "cell_indices")
        if cells[-1] >= header.h * header.w:
            raise DecodeError("cell index outside grid", pos + size - 4, "cell_indices")
    return cells, pos + size


def payload_cost(entry_count: int, channels: int) -> int:
    """Encoded size in bytes of a feature message."""
    return HEADER_BYTES + entry_count * (ENTRY_INDEX_BYTES + FP8_BYTES * channels)


def utility_overhead(entry_count: int) -> int:
    """Encoded size in bytes of a utility-map message."""
    return (HEADER_BYTES + UTILITY_PARAMS_BYTES + ENTRY_INDEX_BYTES * entry_count
            + (entry_count + 1) // 2)


# ---------------------------------------------------------------------------
# Utility maps (control channel)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class UtilityPayload:
    """Affine 4-bit code of a thresholded utility map.

    ``scale`` and ``offset`` are stored as float32 and the codes are computed
    from the stored values, so dequantisation on the receiver is reproducible.
    """

    scale: float
    offset: float
    cells: np.ndarray
    codes: np.ndarray

    def values(self) -> np.ndarray:
        return self.offset + self.codes.astype(np.float64) * self.scale

    @property
    def entry_count(self) -> int:
        return int(self.cells.size)

    def __eq__(self, other):
        if not isinstance(other, UtilityPayload):
            return NotImplemented
        return (self.scale == other.scale and self.offset == other.offset
                and np.array_equal(self.cells, other.cells) and np.array_equal(self.codes, other.codes))


def quantize_utility(umap: MetaUtilityMap, tau: float) -> UtilityPayload:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    keep = umap.values >= tau
    cells = umap.cells[keep]
    u = umap.values[keep]
    offset = float(np.float32(tau))
    if u.size and u.max() > tau:
        scale = float(np.float32((u.max() - tau) / UTILITY_LEVELS))
    else:
        scale = 1.0
    if not scale > 0:
        scale = float(np.finfo(np.float32).tiny)
    codes = np.clip(np.rint((u - offset) / scale), 1, UTILITY_LEVELS).astype(np.uint8)
    return UtilityPayload(scale, offset, cells.copy(), codes)


def encode_utility(umap: MetaUtilityMap, tau: float, frame_id: int = 0) -> bytes:
    payload = quantize_utility(umap, tau)
    return encode_utility_payload(payload, umap.grid, umap.agent_id, frame_id)


def encode_utility_payload(payload: UtilityPayload, grid: GridSpec, agent_id: int, frame_id: int = 0) -> bytes:
    n = payload.entry_count
    codes = payload.codes.astype(np.uint8)
    if n % 2:
        codes = np.append(codes, np.uint8(0))
    packed = (codes[0::2] & 0x0F) | ((codes[1::2] & 0x0F) << 4)
    return b"".join((
        _header_for(grid, MSG_UTILITY, agent_id, frame_id, n).pack(),
        struct.pack("<ff", payload.scale, payload.offset),
        payload.cells.astype("<u4").tobytes(),
        packed.astype(np.uint8).tobytes(),
    ))


def _decode_utility_body(data, pos, header):
    _need(data, pos, UTILITY_PARAMS_BYTES, "scale")
    scale, offset = struct.unpack_from("<ff", data, pos)
    if not (np.isfinite(scale) and scale > 0):
        raise DecodeError(f"invalid scale {scale}", pos, "scale")
    if not (np.isfinite(offset) and offset >= 0):
        raise DecodeError(f"invalid offset {offset}", pos + 4, "offset")
    pos += UTILITY_PARAMS_BYTES
    cells, pos = _read_cells(data, pos, header)
    n = header.entry_count
    size = (n + 1) // 2
    _need(data, pos, size, "codes")
    packed = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    codes = np.empty(2 * size, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    if n % 2 and codes[-1] != 0:
        raise DecodeError("non-zero padding nibble", pos + size - 1, "codes")
    codes = codes[:n]
    if np.any(codes == 0):
        k = int(np.flatnonzero(codes == 0)[0])
        raise DecodeError("code 0 is reserved for absent cells", pos + k // 2, "codes")
    return UtilityPayload(float(scale), float(offset), cells, codes), pos + size


def decode_utility(data: bytes, grid: GridSpec | None = None):
    """Parse one utility message; returns ``(header, MetaUtilityMap, payload)``."""
    header, obj, end = decode_message(data, 0, grid=grid)
    if header.msg_type != MSG_UTILITY:
        raise DecodeError("not a utility message", 5, "msg_type")
    _expect_end(data, end)
    return header, obj[0], obj[1]


# ---------------------------------------------------------------------------
# Feature payloads (data channel)
# ---------------------------------------------------------------------------


def encode_features(fmap: SparseFeatureMap, cells=None, frame_id: int = 0) -> bytes:
    """Serialise the entries of ``fmap`` at ``cells`` (all entries when ``None``)."""
    if cells is None:
        sub = fmap
    else:
        cells = np.unique(np.asarray(cells, dtype=np.int64))
        if not np.all(np.isin(cells, fmap.cells)):
            raise ValueError("mask selects cells the feature map does not hold")
        sub = fmap.restrict(cells)
    return b"".join((
        _header_for(fmap.grid, MSG_FEATURES, fmap.agent_id, frame_id, len(sub)).pack(),
        sub.cells.astype("<u4").tobytes(),
        fp8_encode(sub.values).astype(np.uint8).tobytes(),
    ))


def _decode_feature_body(data, pos, header):
    cells, pos = _read_cells(data, pos, header)
    size = header.entry_count * header.c
    _need(data, pos, size, "features")
    raw = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    return cells, fp8_decode(raw).reshape(header.entry_count, header.c), pos + size


def decode_features(data: bytes, grid: GridSpec | None = None):
    """Parse one feature message; returns ``(header, SparseFeatureMap)``."""
    header, fmap, end = decode_message(data, 0, grid=grid)
    if header.msg_type != MSG_FEATURES:
        raise DecodeError("not a feature message", 5, "msg_type")
    _expect_end(data, end)
    return header, fmap


def _expect_end(data, end):
    if end != len(data):
        raise DecodeError(f"{len(data) - end} trailing bytes after message", end, "trailer")


def decode_message(data: bytes, offset: int = 0, grid: GridSpec | None = None):
    """Parse the message starting at ``offset``.

    Returns ``(header, obj, end)`` where ``obj`` is a :class:`SparseFeatureMap`
    for feature messages and ``(MetaUtilityMap, UtilityPayload)`` for utility
    messages. Any malformed input raises :class:`DecodeError`.
    """
    data = bytes(data)
    header = _unpack_header(data, offset)
    if grid is not None and (grid.h, grid.w, grid.c) != (header.h, header.w, header.c):
        raise DecodeError("grid dimensions do not match the receiver's", offset + 12, "h")
    g = grid or header.grid()
    pos = offset + HEADER_BYTES
    if header.msg_type == MSG_UTILITY:
        payload, end = _decode_utility_body(data, pos, header)
        values = payload.values()
        if np.any(~np.isfinite(values)):
            raise DecodeError("dequantised utility overflows", pos, "scale")
        return header, (MetaUtilityMap(g, header.agent_id, payload.cells, values), payload), end
    cells, values, end = _decode_feature_body(data, pos, header)
    return header, SparseFeatureMap(g, header.agent_id, cells, values), end


def iter_messages(data: bytes):
    """Yield ``(offset, header, obj)`` for each message of a concatenated stream."""
    data = bytes(data)
    pos = 0
    while pos < len(data):
        header, obj, end = decode_message(data, pos)
        yield pos, header, obj
        pos = end


def dump(data: bytes, max_entries: int | None = None) -> str:
    """Human-readable rendering of every message in ``data``."""
    lines = []
    for pos, h, obj in iter_messages(data):
        kind = "utility" if h.msg_type == MSG_UTILITY else "features"
        lines.append(f"@{pos} {kind} agent={h.agent_id} frame={h.frame_id} "
                     f"grid={h.h}x{h.w}x{h.c} entries={h.entry_count}")
        if h.msg_type == MSG_UTILITY:
            umap, payload = obj
            lines.append(f"  scale={payload.scale!r} offset={payload.offset!r}")
            rows = zip(payload.cells.tolist(), payload.codes.tolist(), umap.values.tolist())
            for k, (l, code, u) in enumerate(rows):
                if max_entries is not None and k >= max_entries:
                    lines.append(f"  ... {h.entry_count - k} more")
                    break
                r, c = divmod(l, h.w)
                lines.append(f"  cell {l} ({r},{c}) code={code} utility={u:.6g}")
        else:
            for k, (l, vec) in enumerate(obj):
                if max_entries is not None and k >= max_entries:
                    lines.append(f"  ... {h.entry_count - k} more")
                    break
                r, c = divmod(l, h.w)
                shown = " ".join(f"{v:.4g}" for v in vec)
                lines.append(f"  cell {l} ({r},{c}) [{shown}]")
    return "\n".join(lines)
