"""Binary field files and tagged parameter files.

Field file layout (all integers and floats little-endian, 8 bytes each)::

    b"NOI1" | dtype code | ndims | shape[0..ndims) | dx | dy | dt | payload

dtype code 0 is float64 (row-major payload), code 1 is a boolean mask packed
eight cells per byte, least significant bit first.

Parameter files hold named arrays plus JSON metadata::

    b"NOIP" | header length (uint64) | UTF-8 JSON header | raw array bytes

The header lists each entry's name, dtype and shape in payload order.  Both
writers are deterministic so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .spde import Field3D

FIELD_MAGIC = b"NOI1"
PARAM_MAGIC = b"NOIP"
DTYPE_FLOAT64 = 0
DTYPE_MASK = 1
_ARRAY_DTYPES = {"f8": "<f8", "i8": "<i8"}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def _path(path) -> Path:
    return Path(path)


def encode_field(values: np.ndarray, dx: float = 1.0, dy: float = 1.0, dt: float = 1.0) -> bytes:
    values = np.asarray(values)
    if values.dtype == bool:
        code = DTYPE_MASK
        payload = np.packbits(values.ravel(), bitorder="little").tobytes()
    else:
        if not np.issubdtype(values.dtype, np.floating):
            raise FormatError(f"unsupported field dtype {values.dtype}")
        code = DTYPE_FLOAT64
        payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
    head = struct.pack("<QQ", code, values.ndim)
    head += struct.pack(f"<{values.ndim}Q", *values.shape)
    head += struct.pack("<ddd", dx, dy, dt)
    return FIELD_MAGIC + head + payload


def decode_field(buf: bytes) -> tuple:
    """Return ``(values, (dx, dy, dt))``."""
    if len(buf) < 20 or buf[:4] != FIELD_MAGIC:
        raise FormatError("not a field file (bad magic)")
    code, ndims = struct.unpack_from("<QQ", buf, 4)
    if code not in (DTYPE_FLOAT64, DTYPE_MASK):
        raise FormatError(f"unknown dtype code {code}")
    if ndims > 8:
        raise FormatError(f"implausible number of dimensions {ndims}")
    off = 20
    need = off + 8 * ndims + 24
    if len(buf) < need:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{ndims}Q", buf, off)
    off += 8 * ndims
    spacing = struct.unpack_from("<ddd", buf, off)
    off += 24
    count = int(np.prod(shape, dtype=np.int64))
    body = buf[off:]
    if code == DTYPE_FLOAT64:
        if len(body) != 8 * count:
            raise FormatError(f"payload has {len(body)} bytes, expected {8 * count}")
        values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)
    else:
        nbytes = (count + 7) // 8
        if len(body) != nbytes:
            raise FormatError(f"mask payload has {len(body)} bytes, expected {nbytes}")
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=count, bitorder="little")
        values = bits.astype(bool).reshape(shape)
    return values, spacing


def write_field(path, field, dx: float | None = None, dy: float | None = None,
                dt: float | None = None) -> None:
    """Write a :class:`Field3D` or a plain array (float or boolean mask)."""
    if isinstance(field, Field3D):
        values, sx, sy, st = field.values, field.dx, field.dy, field.dt
    else:
        values, sx, sy, st = np.asarray(field), 1.0, 1.0, 1.0
    sx = sx if dx is None else dx
    sy = sy if dy is None else dy
    st = st if dt is None else dt
    _path(path).write_bytes(encode_field(values, sx, sy, st))


def read_field(path) -> Field3D:
    p = _path(path)
    if not p.is_file():
        raise FileNotFoundError(f"field file not found: {p}")
    values, (dx, dy, dt) = decode_field(p.read_bytes())
    if values.ndim != 3:
        raise FormatError(f"expected a 3-D field, got shape {values.shape}")
    return Field3D(values, dx, dy, dt)


def encode_params(kind: str, arrays: dict, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        tag = "i8" if np.issubdtype(a.dtype, np.integer) else "f8"
        a = np.asarray(a, dtype=_ARRAY_DTYPES[tag], order="C")
        entries.append({"name": name, "dtype": tag, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"kind": kind, "meta": meta or {}, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PARAM_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_params(buf: bytes) -> tuple:
    """Return ``(kind, arrays, meta)``."""
    if len(buf) < 12 or buf[:4] != PARAM_MAGIC:
        raise FormatError("not a parameter file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt parameter header: {exc}") from None
    if not isinstance(header, dict) or not {"kind", "meta", "entries"} <= header.keys():
        raise FormatError("parameter header lacks kind, meta or entries")
    off = 12 + hlen
    arrays = {}
    for e in header["entries"]:
        dtype = np.dtype(_ARRAY_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        size = count * dtype.itemsize
        if off + size > len(buf):
            raise FormatError(f"truncated payload for {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(e["shape"]).copy()
        off += size
    if off != len(buf):
        raise FormatError("trailing bytes after parameter payload")
    return header["kind"], arrays, header["meta"]


def write_params(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    _path(path).write_bytes(encode_params(kind, arrays, meta))


def read_params(path) -> tuple:
    p = _path(path)
    if not p.is_file():
        raise FileNotFoundError(f"parameter file not found: {p}")
    return decode_params(p.read_bytes())


def write_json(path, obj) -> None:
    _path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
