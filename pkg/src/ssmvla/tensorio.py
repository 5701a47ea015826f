"""Self-describing raw tensor files.

Layout (all little-endian)::

    magic   4 bytes  b"SSMT"
    version u16
    dtype   u8       index into DTYPES
    ndim    u8
    shape   ndim x u64
    payload prod(shape) * itemsize bytes, C order

The payload length must match the header exactly; anything else is a
malformed container.
"""
import os
import struct

import numpy as np

from .errors import MalformedContainerError, SchemaVersionError

MAGIC = b"SSMT"
FORMAT_VERSION = 1
DTYPES = ("<f4", "<f8", "<i8", "<i4", "|u1", "|b1")
_HEAD = struct.Struct("<4sHBB")


def encode_tensor(array):
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = np.dtype(dt).str
    if code not in DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=code, order="C")
    header = _HEAD.pack(MAGIC, FORMAT_VERSION, DTYPES.index(code), arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf):
    if len(buf) < _HEAD.size:
        raise MalformedContainerError("tensor header truncated")
    magic, version, code, ndim = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedContainerError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SchemaVersionError(f"tensor format version {version}, expected {FORMAT_VERSION}")
    if code >= len(DTYPES):
        raise MalformedContainerError(f"unknown dtype code {code}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise MalformedContainerError("tensor shape truncated")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = np.dtype(DTYPES[code])
    count = 1
    for s in shape:
        count *= s
    if count * dtype.itemsize > len(buf) - off:
        raise MalformedContainerError(f"payload truncated: want {count * dtype.itemsize} bytes, have {len(buf) - off}")
    if count * dtype.itemsize != len(buf) - off:
        raise MalformedContainerError("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).copy()


def write_tensor(path, array):
    data = encode_tensor(array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())
