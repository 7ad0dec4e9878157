"""MSF1 tensor container.

Layout (all integers little-endian)::

    b"MSF1" | dtype u8 | ndim u8 | dims u32 * ndim | meta_len u32 | meta JSON | data

dtype codes: 0 = f32, 1 = u16, 2 = u32. Data is row-major, last axis fastest.
"""
import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MSF1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<u4")}


def _dtype_code(arr):
    if np.issubdtype(arr.dtype, np.floating):
        return 0
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        if arr.size and arr.min() < 0:
            raise FormatError("integer tensors must be non-negative (u16/u32 only)")
        if arr.dtype == np.uint16:
            return 1
        if arr.size and arr.max() > 0xFFFFFFFF:
            raise FormatError("integer values exceed the u32 range")
        return 2
    raise FormatError(f"unsupported dtype {arr.dtype}")


def encode_tensor(tensor, meta=None):
    arr = np.asarray(tensor)
    code = _dtype_code(arr)
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", len(meta_bytes)) + meta_bytes
    data = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes(order="C")
    return header + data


def decode_tensor(buf, source="<bytes>"):
    def need(n, what):
        if len(buf) < pos + n:
            raise FormatError(f"{source}: truncated while reading {what}")

    pos = 0
    need(6, "header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    pos = 6
    need(4 * ndim, "dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    need(4, "meta length")
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(meta_len, "metadata")
    try:
        meta = json.loads(bytes(buf[pos:pos + meta_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: metadata is not valid JSON ({exc})") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{source}: metadata must be a JSON object")
    pos += meta_len
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    remaining = len(buf) - pos
    if remaining != expected:
        raise FormatError(f"{source}: size mismatch, header promises {expected} data bytes, found {remaining}")
    arr = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=pos)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), meta


def write_tensor(path, tensor, meta=None):
    """Write ``tensor`` to ``path``. Floats are stored as f32, integers as u16/u32."""
    blob = encode_tensor(tensor, meta)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write tensor file {path}: {exc.strerror}") from exc


def read_tensor(path):
    """Return ``(array, meta)`` stored at ``path``."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read tensor file {path}: {exc.strerror}") from exc
    return decode_tensor(buf, str(path))


def write_json(path, doc):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
