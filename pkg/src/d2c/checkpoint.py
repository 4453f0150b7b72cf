"""Named-tensor checkpoint container.

Layout (little-endian)::

    "D2CK" | u32 version | 32-byte sha256 config digest
    u32 config-json length | config json (UTF-8)
    u32 tensor count
    per tensor: u32 name length | name (UTF-8) | u8 dtype (0 = f32, 1 = f64)
                u32 ndim | u32 dims[ndim] | payload

Parameters are stored as f64 so a reload is bit-exact; f32 is accepted on
read. EMA shadows live under ``ema/<name>`` and optimizer moments under
``opt/<name>``.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"D2CK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).digest()


def save(path: str | os.PathLike, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    buf = io.BytesIO()
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(config_digest(config))
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f":
            arr = arr.astype("<f8")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _CODES.get(arr.dtype)
        if code is None:
            arr = arr.astype("<f8")
            code = 1
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = raw[8:40]
    (clen,) = struct.unpack_from("<I", raw, 40)
    off = 44
    config = json.loads(bytes(view[off:off + clen]).decode("utf-8"))
    off += clen
    if config_digest(config) != digest:
        raise FormatError("config digest mismatch")
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BI", raw, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(raw):
                raise FormatError(f"truncated payload for {name}")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if off != len(raw):
        raise FormatError("trailing bytes after last tensor")
    return config, tensors
