"""CPMT binary tensor container and the checkpoint layout built on it.

Record layout (all little-endian)::

    b"CPMT" | version:u8 | rank:u8 | extents:u64 * rank | values:f64 * prod(extents)

A checkpoint is a directory with ``manifest.txt`` (a JSON header line, then
one ``name offset shape`` line per parameter) and ``params.cpmt``, the
records concatenated in manifest order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from corrpm.tensor import ParamStore

MAGIC = b"CPMT"
VERSION = 1


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if a.ndim > 255:
        raise FormatError("rank above 255 not representable")
    head = MAGIC + struct.pack("<BB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_from(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns the array and the next offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"{source}: bad magic at offset {offset}")
    if len(buf) < offset + 6:
        raise FormatError(f"{source}: truncated header at offset {offset}")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset {offset}")
    pos = offset + 6
    if len(buf) < pos + 8 * rank:
        raise FormatError(f"{source}: truncated extents at offset {pos}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 8 * count
    if len(buf) < end:
        raise FormatError(f"{source}: truncated data at offset {pos} (need {8 * count} bytes)")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return data.reshape(shape), end


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    array, end = decode_from(buf, 0, source)
    if end != len(buf):
        raise FormatError(f"{source}: {len(buf) - end} trailing bytes after offset {end}")
    return array


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def save_checkpoint(path, params: ParamStore, header: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    lines = [json.dumps(header or {}, sort_keys=True)]
    for name, t in params.items():
        lines.append(f"{name} {blob.tell()} {','.join(str(n) for n in t.shape)}")
        blob.write(encode(t.data))
    (path / "params.cpmt").write_bytes(blob.getvalue())
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    manifest = path / "manifest.txt"
    blob_path = path / "params.cpmt"
    lines = manifest.read_text().splitlines()
    if not lines:
        raise FormatError(f"{manifest}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest}: header line is not JSON") from exc
    blob = blob_path.read_bytes()
    params = ParamStore()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) not in (2, 3):
            raise FormatError(f"{manifest}:{lineno}: expected 'name offset shape'")
        name, offset = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2].split(",")) if len(parts) == 3 else ()
        array, _ = decode_from(blob, offset, str(blob_path))
        if array.shape != shape:
            raise FormatError(f"{blob_path}: record at offset {offset} has shape {array.shape}, manifest says {shape}")
        params.add(name, array)
    return params, header
