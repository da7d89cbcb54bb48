"""Point-cloud file formats.

Text format: one point per line, whitespace-separated ``x y z f1 ... fC``.
Binary format (little-endian): magic ``SFPC``, uint32 version (1), uint32
point count N, uint32 feature width C, then N*3 float64 coordinates and
N*C float64 features, both row-major.  Loaders validate finiteness.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import ContractError
from .geometry import PointCloud

MAGIC = b"SFPC"
VERSION = 1


def save_text(pc: PointCloud, path) -> None:
    rows = np.hstack([pc.coords, pc.feats])
    header = f"# x y z f1..f{pc.width}"
    np.savetxt(path, rows, fmt="%.17g", header=header)


def load_text(path, width: int | None = None) -> PointCloud:
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if rows.size == 0:
        c = width if width is not None else 0
        return PointCloud(np.zeros((0, 3)), np.zeros((0, c)))
    if rows.shape[1] < 3:
        raise ContractError(f"text point cloud needs >= 3 columns, got {rows.shape[1]}")
    return PointCloud(rows[:, :3], rows[:, 3:])


def save_binary(pc: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, pc.n, pc.width))
        fh.write(pc.coords.astype("<f8").tobytes())
        fh.write(pc.feats.astype("<f8").tobytes())


def load_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContractError(f"bad point-cloud magic {magic!r}")
        version, n, c = struct.unpack("<III", fh.read(12))
        if version != VERSION:
            raise ContractError(f"unsupported point-cloud version {version}")
        coords = np.frombuffer(fh.read(n * 3 * 8), dtype="<f8").reshape(n, 3)
        feats = np.frombuffer(fh.read(n * c * 8), dtype="<f8").reshape(n, c)
    return PointCloud(coords.astype(np.float64), feats.astype(np.float64))
