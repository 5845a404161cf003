"""Binary ``STCG`` grid files.

Layout (little-endian)::

    magic     4 bytes  b"STCG"
    version   u16      1
    kind      u8       0 feature f32, 1 semantic u8, 2 flow f32x2, 3 weights f32
    reserved  u8       0
    X, Y, Z, C u32
    payload   X*Y*Z*C values, element ((x*Y + y)*Z + z)*C + c

In memory, feature and flow grids are channel-first ``(C, X, Y, Z)``;
semantic and weight grids are ``(X, Y, Z)``.
"""

from __future__ import annotations

import hashlib
import os
import struct
from enum import IntEnum
from pathlib import Path
from typing import Tuple, Union

import numpy as np

MAGIC = b"STCG"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIII")


class GridKind(IntEnum):
    FEATURE = 0
    SEMANTIC = 1
    FLOW = 2
    WEIGHTS = 3


class GridFormatError(ValueError):
    pass


class BadMagic(GridFormatError):
    pass


class VersionMismatch(GridFormatError):
    pass


class TruncatedFile(GridFormatError):
    pass


_DTYPES = {
    GridKind.FEATURE: np.dtype("<f4"),
    GridKind.SEMANTIC: np.dtype("u1"),
    GridKind.FLOW: np.dtype("<f4"),
    GridKind.WEIGHTS: np.dtype("<f4"),
}


def encode_grid(data: np.ndarray, kind: GridKind) -> bytes:
    kind = GridKind(kind)
    data = np.asarray(data)
    if kind in (GridKind.FEATURE, GridKind.FLOW):
        if data.ndim != 4:
            raise ValueError(f"{kind.name.lower()} grid must be (C, X, Y, Z), got {data.shape}")
        if kind is GridKind.FLOW and data.shape[0] != 2:
            raise ValueError("flow grid must have 2 channels")
        c = data.shape[0]
        payload = np.moveaxis(data, 0, -1)
    else:
        if data.ndim != 3:
            raise ValueError(f"{kind.name.lower()} grid must be (X, Y, Z), got {data.shape}")
        c = 1
        payload = data[..., None]
    if kind is GridKind.SEMANTIC and data.size and (data.min() < 0 or data.max() > 255):
        raise ValueError("semantic labels must fit in u8")
    x, y, z = payload.shape[:3]
    header = _HEADER.pack(MAGIC, VERSION, int(kind), 0, x, y, z, c)
    return header + np.ascontiguousarray(payload, dtype=_DTYPES[kind]).tobytes()


def decode_grid(buf: bytes) -> Tuple[GridKind, np.ndarray]:
    if len(buf) < _HEADER.size:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise BadMagic(f"bad magic {buf[:4]!r}")
        raise TruncatedFile("file shorter than header")
    magic, version, kind, _, x, y, z, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"grid version {version}, expected {VERSION}")
    try:
        kind = GridKind(kind)
    except ValueError:
        raise GridFormatError(f"unknown grid kind {kind}") from None
    dtype = _DTYPES[kind]
    count = x * y * z * c
    need = _HEADER.size + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFile(f"payload has {len(buf) - _HEADER.size} bytes, expected {need - _HEADER.size}")
    if len(buf) > need:
        raise GridFormatError("trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=_HEADER.size).reshape(x, y, z, c)
    if kind is GridKind.SEMANTIC:
        return kind, arr[..., 0].copy()
    arr = arr.astype(np.float64)
    if kind is GridKind.WEIGHTS:
        return kind, arr[..., 0]
    return kind, np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def write_grid(path: Union[str, os.PathLike], data: np.ndarray, kind: GridKind) -> None:
    Path(path).write_bytes(encode_grid(data, kind))


def read_grid(path: Union[str, os.PathLike], expect: GridKind = None) -> np.ndarray:
    kind, arr = decode_grid(Path(path).read_bytes())
    if expect is not None and kind != expect:
        raise GridFormatError(f"{path}: expected {GridKind(expect).name} grid, found {kind.name}")
    return arr


def read_grid_kind(path) -> Tuple[GridKind, np.ndarray]:
    return decode_grid(Path(path).read_bytes())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
