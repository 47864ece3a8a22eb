"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ASBU" | version u32 | blob_len u32 | blob (UTF-8 JSON)
    | entries... | crc32 u32 of every preceding byte

Each float entry (version 1) is ``name_len u16 | name | rank u8 | dims u32*rank
| float32 values``.  Quantized entries (version 2) carry ``scale f32 |
zero_point i32`` after the dims and int8 values instead of float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import Network, NetworkSpec

MAGIC = b"ASBU"
FLOAT_VERSION = 1
QUANT_VERSION = 2


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeTableMismatch(CheckpointError):
    pass


def _header(version: int, blob: str) -> bytes:
    b = blob.encode("utf-8")
    return MAGIC + struct.pack("<II", version, len(b)) + b


def _entry_head(name: str, shape) -> bytes:
    nb = name.encode("utf-8")
    return (struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(shape))
            + struct.pack(f"<{len(shape)}I", *shape))


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def encode_float(net: Network) -> bytes:
    parts = [_header(FLOAT_VERSION, net.spec.dumps())]
    for name, arr in net.named_state():
        parts.append(_entry_head(name, arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return _seal(b"".join(parts))


def encode_quantized(spec: NetworkSpec, entries, extra: dict) -> bytes:
    """``entries``: iterable of ``(name, int8 array, scale, zero_point)``."""
    blob = json.dumps({"network": spec.to_dict(), **extra}, sort_keys=True, separators=(",", ":"))
    parts = [_header(QUANT_VERSION, blob)]
    for name, q, scale, zp in entries:
        parts.append(_entry_head(name, q.shape))
        parts.append(struct.pack("<fi", scale, zp))
        parts.append(np.ascontiguousarray(q, dtype=np.int8).tobytes())
    return _seal(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes):
    """Return ``(version, blob_text, entries)``; float entries are ``(name, array)``,
    quantized ones ``(name, int8 array, scale, zero_point)``."""
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("CRC mismatch: checkpoint is corrupted")
    r = _Reader(data, len(data) - 4)
    r.take(4)
    version, blob_len = r.unpack("<II")
    if version not in (FLOAT_VERSION, QUANT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blob = r.take(blob_len).decode("utf-8")
    entries = []
    while r.pos < r.end:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        if version == FLOAT_VERSION:
            arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
            entries.append((name, arr.astype(np.float64)))
        else:
            scale, zp = r.unpack("<fi")
            q = np.frombuffer(r.take(n), dtype=np.int8).reshape(dims).copy()
            entries.append((name, q, scale, zp))
    return version, blob, entries


def check_shape_table(net: Network, names_shapes) -> None:
    expected = [(n, tuple(a.shape)) for n, a in net.named_state()]
    got = [(n, tuple(s)) for n, s in names_shapes]
    if expected != got:
        diff = next(((e, g) for e, g in zip(expected, got) if e != g), None)
        raise ShapeTableMismatch(
            f"checkpoint weight table does not match the network ({len(got)} vs {len(expected)} "
            f"entries; first difference: {diff})")


def save_checkpoint(net: Network, path) -> int:
    data = encode_float(net)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Network:
    """Rebuild the stored network; with ``spec`` given, the stored weight table
    must match a network built from that spec instead."""
    version, blob, entries = decode(Path(path).read_bytes())
    if version != FLOAT_VERSION:
        raise CheckpointError(f"expected a float checkpoint (version {FLOAT_VERSION}), got version {version}")
    stored = NetworkSpec.loads(blob)
    net = Network(spec if spec is not None else stored)
    check_shape_table(net, [(n, a.shape) for n, a in entries])
    for (_, dst), (_, src) in zip(net.named_state(), entries):
        dst[...] = src
    return net
