"""Binary tensor files.

Layout, all little-endian::

    8 bytes   magic b"METEORT1"
    1 byte    dtype code (0x01 = float32)
    1 byte    ndim (1, 2 or 3)
    8*ndim    dims as uint64
    payload   4 * prod(dims) bytes, C order
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np

from .errors import CorruptFile, InvalidInput, UnsupportedFormat

MAGIC = b"METEORT1"
DTYPE_F32 = 0x01
_MAX_ELEMENTS = 1 << 40


def header_size(ndim: int) -> int:
    return len(MAGIC) + 2 + 8 * ndim


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.ndim not in (1, 2, 3):
        raise InvalidInput(f"tensor files hold 1 to 3 dims, got {a.ndim}")
    if not np.issubdtype(a.dtype, np.number) or np.iscomplexobj(a):
        raise InvalidInput(f"cannot store dtype {a.dtype}")
    a = np.ascontiguousarray(a, dtype="<f4")
    head = MAGIC + bytes([DTYPE_F32, a.ndim]) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < len(MAGIC) + 2:
        raise CorruptFile("file shorter than the fixed header")
    if data[: len(MAGIC)] != MAGIC:
        raise UnsupportedFormat(f"bad magic {data[:len(MAGIC)]!r}")
    dtype, ndim = data[8], data[9]
    if dtype != DTYPE_F32:
        raise UnsupportedFormat(f"unknown dtype code 0x{dtype:02x}")
    if ndim not in (1, 2, 3):
        raise UnsupportedFormat(f"unsupported ndim {ndim}")
    hs = header_size(ndim)
    if len(data) < hs:
        raise CorruptFile("truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", data, 10)
    count = math.prod(dims)
    if count > _MAX_ELEMENTS:
        raise CorruptFile(f"dims {dims} overflow the element limit")
    expected = hs + 4 * count
    if len(data) < expected:
        raise CorruptFile(f"payload has {len(data) - hs} bytes, dims need {4 * count}")
    if len(data) > expected:
        raise CorruptFile(f"{len(data) - expected} trailing bytes after payload")
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=hs)
    return payload.reshape(dims)


def write_tensor(path, array) -> int:
    """Write ``array`` as float32; returns the file size in bytes."""
    blob = encode_tensor(array)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_tensor_f32(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file, widened to float64."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return read_tensor_f32(path).astype(np.float64)
