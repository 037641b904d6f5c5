"""Voxel occupancy grids, probability fields, point sets, and their file formats.

Grids are dense N^3 boolean cubes indexed [x, y, z] with x fastest in
memory order (cell index = x + N*y + N^2*z). The WVOX format stores that
order bit-packed; see save_grid/load_grid. All metric conventions
(empty-set cases, thresholds) live here so every consumer shares them.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from voxcomplete import kernels
from voxcomplete.errors import (
    ConfigError,
    CorruptionError,
    DomainError,
    FormatError,
    ShapeError,
)

SUPPORTED_RESOLUTIONS = (8, 16, 32, 64)

WVOX_MAGIC = b"WVOX"
WVFD_MAGIC = b"WVFD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class VoxelGrid:
    """Binary occupancy cube. occ[x, y, z] is True where the shape is solid."""

    occ: np.ndarray
    object_id: str | None = None
    category: str | None = None

    def __post_init__(self):
        occ = np.asarray(self.occ)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ShapeError(f"occupancy must be a cube, got shape {occ.shape}")
        if occ.dtype != np.bool_:
            occ = occ != 0
        occ = np.ascontiguousarray(occ)
        occ.flags.writeable = False
        object.__setattr__(self, "occ", occ)

    @property
    def resolution(self) -> int:
        return self.occ.shape[0]

    @property
    def count(self) -> int:
        return int(self.occ.sum())

    def with_meta(self, object_id=None, category=None) -> "VoxelGrid":
        return VoxelGrid(
            self.occ,
            object_id if object_id is not None else self.object_id,
            category if category is not None else self.category,
        )

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.occ.shape == other.occ.shape and bool(
            np.array_equal(self.occ, other.occ)
        )


@dataclass(frozen=True)
class DenseField:
    """Per-voxel occupancy probabilities in [0, 1], same layout as VoxelGrid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ShapeError(f"field must be a cube, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise DomainError("field contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise DomainError(
                f"field values outside [0, 1]: min {v.min()}, max {v.max()}"
            )
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PointSet:
    """Points in the unit cube, one row per point."""

    points: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if p.ndim != 2 or p.shape[1] != 3:
            raise ShapeError(f"points must be (n, 3), got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise DomainError("point coordinates must lie in [0, 1]")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# file formats

_LOAD_AUDIT: list[list[str]] = []


@contextlib.contextmanager
def record_loads():
    """Collect the paths of every grid/field loaded inside the block.

    Used to audit pipeline stages for data they must not touch (the
    refinement stage never reads ground-truth completes of test objects).
    """
    sink: list[str] = []
    _LOAD_AUDIT.append(sink)
    try:
        yield sink
    finally:
        _LOAD_AUDIT.remove(sink)


def _note_load(path):
    for sink in _LOAD_AUDIT:
        sink.append(os.path.abspath(os.fspath(path)))


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        with contextlib.suppress(OSError):
            os.remove(tmp)
        raise OSError(f"failed writing {path}: {exc}") from exc


def _check_resolution(n: int):
    if n not in SUPPORTED_RESOLUTIONS:
        raise ConfigError(
            f"resolution {n} unsupported; expected one of {SUPPORTED_RESOLUTIONS}"
        )


def save_grid(grid: VoxelGrid, path) -> None:
    """Write a grid as WVOX. Byte-deterministic for a given grid."""
    _check_resolution(grid.resolution)
    n = grid.resolution
    header = struct.pack("<4sII", WVOX_MAGIC, FORMAT_VERSION, n)
    bits = np.packbits(
        grid.occ.ravel(order="F").astype(np.uint8), bitorder="little"
    ).tobytes()
    meta = b""
    if grid.object_id is not None or grid.category is not None:
        doc = {}
        if grid.object_id is not None:
            doc["object_id"] = grid.object_id
        if grid.category is not None:
            doc["category"] = grid.category
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        meta = struct.pack("<I", len(blob)) + blob
    _atomic_write(path, header + bits + meta)


def load_grid(path) -> VoxelGrid:
    """Read a WVOX file; inverse of save_grid."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != WVOX_MAGIC:
        raise FormatError(f"{path}: not a WVOX file (bad magic)")
    if len(buf) < 12:
        raise CorruptionError(f"{path}: truncated header")
    version, n = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported WVOX version {version}")
    _check_resolution(n)
    payload = math.ceil(n**3 / 8)
    if len(buf) < 12 + payload:
        raise CorruptionError(
            f"{path}: payload truncated ({len(buf) - 12} of {payload} bytes)"
        )
    bits = np.unpackbits(
        np.frombuffer(buf, dtype=np.uint8, count=payload, offset=12),
        bitorder="little",
        count=n**3,
    )
    occ = bits.reshape((n, n, n), order="F").astype(bool)
    object_id = category = None
    rest = buf[12 + payload:]
    if rest:
        if len(rest) < 4:
            raise CorruptionError(f"{path}: dangling metadata length prefix")
        (mlen,) = struct.unpack("<I", rest[:4])
        if len(rest) < 4 + mlen:
            raise CorruptionError(f"{path}: metadata truncated")
        try:
            doc = json.loads(rest[4:4 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptionError(f"{path}: unreadable metadata: {exc}") from exc
        object_id = doc.get("object_id")
        category = doc.get("category")
    _note_load(path)
    return VoxelGrid(occ, object_id=object_id, category=category)


def save_field(field: DenseField, path) -> None:
    """Write a probability field (WVFD): header + N^3 little-endian float64."""
    _check_resolution(field.resolution)
    header = struct.pack("<4sII", WVFD_MAGIC, FORMAT_VERSION, field.resolution)
    data = field.values.ravel(order="F").astype("<f8").tobytes()
    _atomic_write(path, header + data)


def load_field(path) -> DenseField:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != WVFD_MAGIC:
        raise FormatError(f"{path}: not a WVFD file (bad magic)")
    if len(buf) < 12:
        raise CorruptionError(f"{path}: truncated header")
    version, n = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported WVFD version {version}")
    _check_resolution(n)
    payload = n**3 * 8
    if len(buf) < 12 + payload:
        raise CorruptionError(f"{path}: payload truncated")
    values = np.frombuffer(buf, dtype="<f8", count=n**3, offset=12)
    _note_load(path)
    return DenseField(values.reshape((n, n, n), order="F"))


# ---------------------------------------------------------------------------
# conversions and metrics

def binarize(fld: DenseField, threshold: float = 0.5) -> VoxelGrid:
    """Occupied iff value >= threshold. Evaluation/export convention only."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    return VoxelGrid(fld.values >= threshold)


def _pair(a: VoxelGrid, b: VoxelGrid):
    if a.resolution != b.resolution:
        raise ShapeError(
            f"resolution mismatch: {a.resolution} vs {b.resolution}"
        )
    return a.occ, b.occ


def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """|a AND b| / |a OR b|; 1.0 when both grids are empty."""
    x, y = _pair(a, b)
    union_n = int(np.logical_or(x, y).sum())
    if union_n == 0:
        return 1.0
    return int(np.logical_and(x, y).sum()) / union_n


def f1(pred: VoxelGrid, gt: VoxelGrid) -> float:
    """Harmonic mean of precision/recall over occupied voxels; 0 when TP=0."""
    p, g = _pair(pred, gt)
    tp = int(np.logical_and(p, g).sum())
    if tp == 0:
        return 0.0
    fp = int(np.logical_and(p, ~g).sum())
    fn = int(np.logical_and(~p, g).sum())
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def to_points(grid: VoxelGrid) -> PointSet:
    """One point per occupied voxel at its cell center in the unit cube."""
    n = grid.resolution
    idx = np.argwhere(grid.occ)
    return PointSet((idx + 0.5) / n)


def chamfer(a: PointSet, b: PointSet) -> float:
    """Symmetric mean nearest-neighbor distance (unsquared, unit-cube scale).

    Reported values are scaled x100 at the reporting layer, not here.
    """
    if len(a) == 0 or len(b) == 0:
        raise DomainError("chamfer distance undefined for an empty point set")
    ab = float(kernels.min_dists(a.points, b.points).mean())
    ba = float(kernels.min_dists(b.points, a.points).mean())
    return 0.5 * (ab + ba)


def overlap_count(a: VoxelGrid, b: VoxelGrid) -> int:
    """Number of co-occupied voxels."""
    x, y = _pair(a, b)
    return int(np.logical_and(x, y).sum())


def union(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    x, y = _pair(a, b)
    return VoxelGrid(np.logical_or(x, y))


def missing_part(coarse: VoxelGrid, partial: VoxelGrid) -> VoxelGrid:
    """T: voxels the coarse prediction adds beyond the partial observation."""
    c, p = _pair(coarse, partial)
    return VoxelGrid(np.logical_and(c, ~p))
