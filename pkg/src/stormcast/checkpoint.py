"""Versioned checkpoint files: named float arrays plus a config text block.

Layout (all little-endian):

    magic   4 bytes  b"SCKP"
    version u16      currently 1
    cfg_len u32      length of the UTF-8 config block
    count   u32      number of named arrays
    config  cfg_len bytes
    then per array:
        name_len u16, name bytes (UTF-8)
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     ndim * u32
        data     prod(dims) * itemsize bytes, C order

Arrays are stored in the order given; readers get back an ordered dict.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import DataError

_MAGIC = b"SCKP"
_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_ENTRY_HEAD = struct.Struct("<HBB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_checkpoint(path, arrays: Dict[str, np.ndarray], config_text: str = "") -> None:
    """Write named arrays and a config echo to ``path``."""
    cfg = config_text.encode("utf-8")
    parts = [_HEADER.pack(_MAGIC, _VERSION, len(cfg), len(arrays)), cfg]
    for name, arr in arrays.items():
        arr = np.asarray(arr)  # tobytes(order="C") below handles layout; keeps 0-d shapes
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        code = _DTYPE_CODES[arr.dtype]
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise DataError(f"array name too long: {name!r}")
        parts.append(_ENTRY_HEAD.pack(len(name_b), code, arr.ndim))
        parts.append(name_b)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Tuple[Dict[str, np.ndarray], str]:
    """Read a checkpoint, returning (arrays, config_text)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"checkpoint too short: {path}")
    magic, version, cfg_len, count = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    if version != _VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = _HEADER.size
    if off + cfg_len > len(blob):
        raise DataError(f"truncated checkpoint config in {path}")
    config_text = blob[off : off + cfg_len].decode("utf-8")
    off += cfg_len
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + _ENTRY_HEAD.size > len(blob):
            raise DataError(f"truncated checkpoint entry in {path}")
        name_len, code, ndim = _ENTRY_HEAD.unpack_from(blob, off)
        off += _ENTRY_HEAD.size
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        if code not in _DTYPES:
            raise DataError(f"unknown dtype code {code} in {path}")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if off + nbytes > len(blob):
            raise DataError(f"truncated array data for {name!r} in {path}")
        arr = np.frombuffer(blob[off : off + nbytes], dtype=dtype).reshape(dims)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
        off += nbytes
    if off != len(blob):
        raise DataError(f"trailing bytes after checkpoint payload in {path}")
    return arrays, config_text
