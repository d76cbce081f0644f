"""MGCT tensor files, PGM masks and the FNV-1a checksum they rely on.

MGCT layout (all little-endian)::

    b"MGCT" | u8 version=1 | u8 dtype | u16 rank | u32 dims[rank] | payload | u64 fnv1a(payload)

dtype codes: 0 = float32, 1 = float64, 2 = uint8. Only float32 is used for
image artifacts; float64 carries checkpoint parameters so a save/load cycle is
bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numba
import numpy as np

MAGIC = b"MGCT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {"float32": 0, "float64": 1, "uint8": 2}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ChecksumError(ValueError):
    """Payload does not match its stored checksum (or the file is truncated)."""


class FormatError(ValueError):
    pass


@numba.njit(cache=True)
def _fnv1a(data):
    h = numba.uint64(FNV_OFFSET)
    prime = numba.uint64(FNV_PRIME)
    for b in data:
        h = (h ^ numba.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8)))


def encode(arr: np.ndarray, dtype: str | np.dtype = "<f4") -> bytes:
    name = np.dtype(dtype).name
    if name not in _CODES:
        raise FormatError(f"unsupported MGCT dtype {name}")
    code = _CODES[name]
    a = np.ascontiguousarray(arr, dtype=DTYPES[code])
    if a.ndim > 0xFFFF:
        raise FormatError("rank too large")
    payload = a.tobytes()
    head = MAGIC + struct.pack("<BBH", VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + payload + struct.pack("<Q", fnv1a64(payload))


def decode_from(buf: io.BufferedIOBase | io.BytesIO) -> np.ndarray:
    """Read one MGCT block from a stream positioned at its magic."""
    head = buf.read(8)
    if len(head) < 8:
        raise ChecksumError("truncated MGCT header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}")
    version, code, rank = struct.unpack("<BBH", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported MGCT version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims_raw = buf.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise ChecksumError("truncated MGCT dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    dt = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    payload = buf.read(nbytes)
    tail = buf.read(8)
    if len(payload) < nbytes or len(tail) < 8:
        raise ChecksumError("truncated MGCT payload")
    if struct.unpack("<Q", tail)[0] != fnv1a64(payload):
        raise ChecksumError("MGCT checksum mismatch")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def decode(data: bytes) -> np.ndarray:
    return decode_from(io.BytesIO(data))


def save(arr: np.ndarray, path, dtype="<f4") -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arr, dtype))
    tmp.replace(path)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_from(fh)


# -- PGM (binary masks) ------------------------------------------------------------

def save_pgm(mask: np.ndarray, path) -> None:
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ValueError("PGM export expects a 2-D binary mask")
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n1\n".encode() + m.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM (P5) file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) < w * h:
        raise ChecksumError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
