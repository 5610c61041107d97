"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"TTA1"  u32 version  u32 entry_count
    per entry: u16 name_len, UTF-8 name, u8 rank, rank x u32 dims
    payload:   float64 values in layout order
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import ParamLayout, ParamVector
from .fileio import atomic_write_bytes

MAGIC = b"TTA1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ParamVector, version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(params.layout.entries))]
    for name, shape, _ in params.layout.entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        if len(shape) > 0xFF:
            raise CheckpointError(f"entry {name!r} has rank {len(shape)} > 255")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(np.asarray(params.values, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> ParamVector:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a TTA1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    pos, shapes = 12, []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            shapes.append((name, tuple(int(d) for d in dims)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed header ({exc})") from None
    layout = ParamLayout.from_shapes(shapes)
    expected = 8 * layout.total_len
    if len(body) - pos != expected:
        raise CheckpointError(
            f"{source}: payload has {len(body) - pos} bytes, layout needs {expected}")
    values = np.frombuffer(body, dtype="<f8", offset=pos).astype(np.float64)
    return ParamVector(layout, values)


def save_checkpoint(path, params: ParamVector) -> Path:
    return atomic_write_bytes(path, encode_checkpoint(params))


def load_checkpoint(path) -> ParamVector:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
