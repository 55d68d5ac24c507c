"""Versioned binary checkpoints with a bit-exact round trip.

Layout, all integers little-endian:

    magic   4 bytes  "CDON"
    version u32      currently 1
    records until EOF, each:
        u32  name length, then that many UTF-8 bytes
        u8   dtype code (1=f64, 2=f32, 3=i64, 4=u8)
        u8   rank
        u32  dims (rank of them)
        payload, raw little-endian values

Parameters live under "param/<name>", optimizer velocities under
"vel/<name>"; "meta/step" and "meta/config_hash" carry the counter and the
config fingerprint.  Malformed files fail with the byte offset named.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"CDON"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    version: int
    params: dict
    velocities: dict = field(default_factory=dict)
    step: int = 0
    config_hash: str = ""


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_CODES:
        raise FormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
    payload = arr.astype(le, copy=False).tobytes()
    nm = name.encode("utf-8")
    head = struct.pack("<I", len(nm)) + nm
    head += struct.pack("<BB", _DTYPE_CODES[le], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = bytearray(MAGIC)
    blob += struct.pack("<I", ckpt.version)
    for name in sorted(ckpt.params):
        blob += _encode_record(f"param/{name}", ckpt.params[name])
    for name in sorted(ckpt.velocities):
        blob += _encode_record(f"vel/{name}", ckpt.velocities[name])
    blob += _encode_record("meta/step", np.array([ckpt.step], dtype="<i8"))
    blob += _encode_record(
        "meta/config_hash",
        np.frombuffer(ckpt.config_hash.encode("utf-8"), dtype="u1"))
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint: wanted {n} bytes for {what} "
                f"at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(
            f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")

    records = {}
    while not r.exhausted:
        at = r.pos
        (nlen,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"{name} header"))
        if code not in _CODE_DTYPES:
            raise FormatError(
                f"record {name!r}: unknown dtype code {code} at offset {at}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(count * dtype.itemsize, f"{name} payload")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()

    params, velocities = {}, {}
    step = 0
    config_hash = ""
    for name, arr in records.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("vel/"):
            velocities[name[len("vel/"):]] = arr
        elif name == "meta/step":
            step = int(arr[0])
        elif name == "meta/config_hash":
            config_hash = arr.tobytes().decode("utf-8")
        else:
            raise FormatError(f"unknown record {name!r}")
    return Checkpoint(version=VERSION, params=params, velocities=velocities,
                      step=step, config_hash=config_hash)
