"""Binary tensor container used for depth sidecars and model parameters.

Layout (little endian):

    magic   4 bytes  b"HHBT"
    version u32      currently 1
    hasfill u8       1 when a fill value is stored
    fill    f64      background fill (0.0 when absent)
    ndim    u32
    shape   u64 * ndim
    data    f64 * prod(shape), row major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .transform import RasterGrid

MAGIC = b"HHBT"
VERSION = 1


def save_tensor(path, array: np.ndarray, fill: float | None = None) -> None:
    array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack(
        "<IBd I".replace(" ", ""),
        VERSION,
        0 if fill is None else 1,
        0.0 if fill is None else float(fill),
        array.ndim,
    )
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    Path(path).write_bytes(header + dims + array.tobytes())


def load_tensor(path) -> tuple[np.ndarray, float | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a tensor file (bad magic)")
    try:
        version, hasfill, fill, ndim = struct.unpack_from("<IBdI", raw, 4)
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated tensor header") from exc
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported tensor version {version}")
    offset = 4 + struct.calcsize("<IBdI")
    try:
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated shape header") from exc
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - offset < 8 * count:
        raise DataFormatError(f"{path}: truncated tensor payload")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(float), (float(fill) if hasfill else None)


def save_grid(path, grid: RasterGrid) -> None:
    save_tensor(path, grid.values, fill=grid.fill)


def load_grid(path) -> RasterGrid:
    values, fill = load_tensor(path)
    if values.ndim != 2:
        raise DataFormatError(f"{path}: grid tensor must be 2D, got {values.ndim}D")
    return RasterGrid(values, fill=0.0 if fill is None else fill)
