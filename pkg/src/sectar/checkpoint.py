"""Binary parameter checkpoints and the plain-text metadata sidecar.

Layout: ``b"SECTAR1\\n"`` followed by one record per named parameter::

    u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f64 values[prod(dims)]

All integers and floats are little-endian; values are row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SECTAR1\n"
_U32 = struct.Struct("<I")


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += _U32.pack(len(raw)) + raw + _U32.pack(arr.ndim)
        for d in arr.shape:
            out += _U32.pack(d)
        out += np.ascontiguousarray(arr).tobytes()
    return bytes(out)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise ValueError("not a SECTAR1 checkpoint (bad magic)")
    pos = len(MAGIC)
    params: dict[str, np.ndarray] = {}

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(data):
            raise ValueError("truncated checkpoint")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    while pos < len(data):
        n = u32()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        dims = tuple(u32() for _ in range(u32()))
        count = int(np.prod(dims)) if dims else 1
        end = pos + 8 * count
        if end > len(data):
            raise ValueError(f"truncated checkpoint in parameter {name!r}")
        params[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
        pos = end
    return params


def save(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def save_meta(path: str | Path, meta: Mapping[str, object]) -> None:
    lines = [f"{k}={v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_meta(path: str | Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta
