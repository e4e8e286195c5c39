"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DLCK" | u32 version | u32 record count
    per record: u32 name length | name (utf-8) | u8 dtype code | u32 ndim
                | u64 dims... | u64 payload bytes | payload | u32 crc32(record)
    u32 crc32 of everything before it

The first record is ``meta`` (a utf-8 JSON document); the rest are tensors.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"DLCK"
FORMAT_VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_JSON = 4
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    meta: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _encode_record(name: str, code: int, shape: tuple, payload: bytes) -> bytes:
    nb = name.encode("utf-8")
    body = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, len(shape))
    body += b"".join(struct.pack("<Q", d) for d in shape)
    body += struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, 1 + len(ckpt.tensors)),
             _encode_record("meta", _JSON, (len(meta),), meta)]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype == bool:
            arr = arr.astype("u1")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        parts.append(_encode_record(name, _CODES[dt], arr.shape,
                                    np.ascontiguousarray(arr, dtype=dt).tobytes()))
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically via a temporary sibling file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    meta, tensors = None, {}
    for i in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I", f"record {i} name length")
        raw = r.take(nlen, f"record {i} name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: record {i} has a corrupted name") from None
        code, ndim = r.unpack("<BI", f"record {name!r} header")
        if ndim > 8:
            raise CheckpointError(f"{path}: record {name!r} is corrupted (ndim {ndim})")
        shape = tuple(r.unpack("<Q", f"record {name!r} shape")[0] for _ in range(ndim))
        (nbytes,) = r.unpack("<Q", f"record {name!r} size")
        payload = r.take(nbytes, f"record {name!r} payload")
        body = buf[start:r.pos]
        (crc,) = r.unpack("<I", f"record {name!r} checksum")
        if zlib.crc32(body) != crc:
            raise CheckpointError(f"{path}: record {name!r} is corrupted (checksum mismatch)")
        if code == _JSON:
            if name != "meta":
                raise CheckpointError(f"{path}: unexpected JSON record {name!r}")
            meta = json.loads(payload.decode("utf-8"))
            continue
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype code {code}")
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: record {name!r} size does not match its shape {shape}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    end = r.pos
    (crc,) = r.unpack("<I", "trailing checksum")
    if zlib.crc32(buf[:end]) != crc:
        raise CheckpointError(f"{path}: trailing checksum mismatch")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} unexpected trailing bytes")
    if meta is None:
        raise CheckpointError(f"{path}: missing meta record")
    return Checkpoint(meta, tensors)


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = decode(path.read_bytes(), path)
    if expected_hash is not None and ckpt.meta.get("config_hash") != expected_hash:
        raise CheckpointError(
            f"{path}: config hash {ckpt.meta.get('config_hash')} does not match {expected_hash}")
    return ckpt
