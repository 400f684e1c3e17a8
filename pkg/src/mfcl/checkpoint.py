"""Binary checkpoint format.

Layout (little endian)::

    magic  b"MFCLCKPT"
    u32    format version
    u32    length of config JSON, then the UTF-8 JSON (sorted keys)
    u32    record count
    per record, sorted by name:
        u16 name length, name
        u8  dtype string length, dtype string (numpy ``str``, e.g. "<f8")
        u8  ndim, then ndim x u64 dims
        raw C-order array bytes

Scalars such as the step counter are stored as 0-d records.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MFCLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_records(records: dict[str, np.ndarray], config: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.asarray(records[name])  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.kind not in "fiub":
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        key = name.encode()
        dt = arr.dtype.str.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", len(dt)))
        buf.write(dt)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_records(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        (dlen,) = r.unpack("<B")
        dtype = np.dtype(r.take(dlen).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        records[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last record")
    return records, config


def save_records(path, records: dict[str, np.ndarray], config: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_records(records, config))
    tmp.replace(path)
    return path


def load_records(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_records(Path(path).read_bytes())
