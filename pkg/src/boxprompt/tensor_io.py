"""Bit-exact binary tensor interchange (.dfgt files).

Wire layout, in order:

* 4-byte magic ``DFGT``
* 1-byte format version (``0x01``)
* 1-byte dtype code: ``0x00`` float32, ``0x01`` uint8, ``0x02`` int32
* 1-byte ndim (1..4)
* ndim little-endian uint32 shape entries
* raw little-endian row-major payload

Writing the same tensor twice produces identical bytes, and streams may be
concatenated: ``read_tensor`` consumes exactly one tensor and leaves the
stream positioned at the next byte.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .exceptions import TensorFormatError

MAGIC = b"DFGT"
VERSION = 1
FILE_EXTENSION = ".dfgt"

_DTYPE_TO_CODE = {
    np.dtype("float32"): 0x00,
    np.dtype("uint8"): 0x01,
    np.dtype("int32"): 0x02,
}
_CODE_TO_DTYPE = {
    0x00: np.dtype("<f4"),
    0x01: np.dtype("u1"),
    0x02: np.dtype("<i4"),
}
_MAX_NDIM = 4
_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


def write_tensor(tensor: np.ndarray, sink: BinaryIO) -> int:
    """Encode ``tensor`` onto ``sink``; returns the number of bytes written."""
    arr = np.asarray(tensor)
    dtype = arr.dtype.newbyteorder("=")
    if dtype not in _DTYPE_TO_CODE:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > _MAX_NDIM:
        raise TensorFormatError(f"ndim must be 1..{_MAX_NDIM}, got {arr.ndim}")
    elements = 1
    for dim in arr.shape:
        if dim < 1:
            raise TensorFormatError(f"shape entries must be >= 1, got {arr.shape}")
        if dim > _U32_MAX:
            raise TensorFormatError(f"shape entry {dim} exceeds uint32")
        elements *= dim
    if elements > _U64_MAX:
        raise TensorFormatError(f"element count overflows uint64: {arr.shape}")

    header = MAGIC + struct.pack(
        "<BBB", VERSION, _DTYPE_TO_CODE[dtype], arr.ndim
    )
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def read_tensor(source: BinaryIO) -> np.ndarray:
    """Decode one tensor from ``source``, validating the full header."""
    magic = source.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    head = source.read(3)
    if len(head) != 3:
        raise TensorFormatError("truncated header")
    version, dtype_code, ndim = struct.unpack("<BBB", head)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype_code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype code 0x{dtype_code:02x}")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise TensorFormatError(f"ndim must be 1..{_MAX_NDIM}, got {ndim}")
    raw_shape = source.read(4 * ndim)
    if len(raw_shape) != 4 * ndim:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack(f"<{ndim}I", raw_shape)
    if any(dim < 1 for dim in shape):
        raise TensorFormatError(f"shape entries must be >= 1, got {shape}")
    dtype = _CODE_TO_DTYPE[dtype_code]
    elements = 1
    for dim in shape:
        elements *= dim
    nbytes = elements * dtype.itemsize
    payload = source.read(nbytes)
    if len(payload) != nbytes:
        raise TensorFormatError(
            f"truncated payload: expected {nbytes} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # Native-endian, writable copy; frombuffer views are read-only.
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor_file(tensor: np.ndarray, path) -> int:
    with open(path, "wb") as sink:
        return write_tensor(tensor, sink)


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as source:
        return read_tensor(source)
