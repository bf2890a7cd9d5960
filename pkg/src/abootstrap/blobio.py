"""The ``ABT1`` tensor blob container shared by datasets and checkpoints.

Layout (little-endian): magic ``b"ABT1"``, dtype code (u8: 0=uint8, 1=float32),
rank (u8), ``rank`` u32 dims, then the row-major payload.
"""
import struct

import numpy as np

MAGIC = b"ABT1"
DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
CODE_FOR = {np.dtype("uint8"): 0, np.dtype("float32"): 1}


class BlobError(Exception):
    """Base class for container errors."""


class BadHeader(BlobError):
    pass


class TruncatedBlob(BlobError):
    pass


class ShapeMismatch(BlobError):
    pass


class MissingBlob(BlobError):
    pass


class MalformedManifest(BlobError):
    pass


def encode(array):
    a = np.asarray(array)
    if a.dtype not in CODE_FOR:
        raise TypeError(f"unsupported dtype {a.dtype}; use uint8 or float32")
    header = MAGIC + struct.pack("<BB", CODE_FOR[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPE_CODES[CODE_FOR[a.dtype]]).tobytes()


def decode(buf, offset=0):
    """Decode one blob at ``offset``; returns ``(array, next_offset)``."""
    mv = memoryview(buf)
    if len(mv) < offset + 6:
        raise TruncatedBlob(f"blob header truncated at offset {offset}")
    if bytes(mv[offset:offset + 4]) != MAGIC:
        raise BadHeader(f"bad header at offset {offset}: expected magic {MAGIC!r}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPE_CODES:
        raise BadHeader(f"bad header at offset {offset}: unknown dtype code {code}")
    pos = offset + 6
    if len(mv) < pos + 4 * rank:
        raise TruncatedBlob(f"blob dims truncated at offset {offset}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(mv) < pos + nbytes:
        raise TruncatedBlob(f"payload truncated at offset {offset}: need {nbytes} bytes, "
                            f"have {len(mv) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(dims).copy(), pos + nbytes
