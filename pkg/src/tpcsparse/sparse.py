"""Sparse tensors on an integer lattice and the kernel maps that drive sparse convolution.

Coordinates are stored as an ``(N, 4)`` int64 array of ``(b, i, j, k)`` rows
kept in lexicographic order.  Spatial coordinates are absolute lattice
positions: after a stride-``t`` operation every coordinate is a multiple of
``t``.  Strided outputs use the floor-division rule
``out = floor(c / (s * t)) * (s * t)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CoordRangeError, EmptyEvent, InvalidPoint, ShapeError

COORD_LIMIT = 32767
MAX_BATCH = 32767

CUBE3 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CUBE2 = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
CENTER = np.zeros((1, 3), dtype=np.int64)
CENTER3 = 13  # row of (0, 0, 0) in CUBE3


@dataclass(frozen=True, eq=False)
class SparseTensor:
    coords: np.ndarray  # (N, 4) int64, lexicographic, unique
    feats: np.ndarray  # (N, C)
    stride: int = 1
    batch_size: int = field(default=-1)

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 4:
            raise ShapeError(f"coords must be (N, 4), got {self.coords.shape}")
        if self.feats.ndim != 2 or len(self.feats) != len(self.coords):
            raise ShapeError(
                f"features {self.feats.shape} do not match {len(self.coords)} coordinates"
            )
        if self.batch_size < 0:
            bs = int(self.coords[:, 0].max()) + 1 if len(self.coords) else 0
            object.__setattr__(self, "batch_size", bs)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def replace(self, feats: np.ndarray) -> "SparseTensor":
        """Same coordinates, new feature matrix."""
        return SparseTensor(self.coords, feats, self.stride, self.batch_size)

    def event_sizes(self) -> np.ndarray:
        return np.bincount(self.coords[:, 0], minlength=self.batch_size)


@dataclass(frozen=True, eq=False)
class KernelMap:
    """(input row, output row) pairs grouped by kernel offset.

    Pairs for offset ``o`` are ``in_rows[ptr[o]:ptr[o+1]]`` and the matching
    slice of ``out_rows``; ``offsets`` are in lattice units of the input.
    """

    offsets: np.ndarray
    in_rows: np.ndarray
    out_rows: np.ndarray
    ptr: np.ndarray
    out_coords: np.ndarray
    in_stride: int
    out_stride: int
    n_in: int

    @property
    def n_out(self) -> int:
        return len(self.out_coords)

    @property
    def volume(self) -> int:
        return len(self.offsets)

    def pairs(self, o: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.ptr[o], self.ptr[o + 1]
        return self.in_rows[lo:hi], self.out_rows[lo:hi]

    def __len__(self) -> int:
        return len(self.in_rows)


def check_range(coords: np.ndarray) -> None:
    if len(coords) == 0:
        return
    spatial = coords[:, 1:] if coords.shape[1] == 4 else coords
    if np.abs(spatial).max() > COORD_LIMIT:
        raise CoordRangeError(f"lattice coordinate exceeds +/-{COORD_LIMIT}")
    if coords.shape[1] == 4 and coords[:, 0].max() > MAX_BATCH:
        raise CoordRangeError(f"batch index exceeds {MAX_BATCH}")


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Order-preserving 64-bit key: 16 bits for b and for each offset-encoded axis."""
    check_range(coords)
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] << 48) | ((c[:, 1] + 32768) << 32) | ((c[:, 2] + 32768) << 16) | (c[:, 3] + 32768)


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    out = np.empty((len(keys), 4), dtype=np.int64)
    out[:, 0] = keys >> 48
    out[:, 1] = ((keys >> 32) & 0xFFFF) - 32768
    out[:, 2] = ((keys >> 16) & 0xFFFF) - 32768
    out[:, 3] = (keys & 0xFFFF) - 32768
    return out


def quantize(points: np.ndarray, voxel_size: float, extra: str | None = None):
    """Map ``(x, y, z, q)`` points onto lattice sites of edge ``voxel_size``.

    Points sharing a cell are merged and their charges summed.  Returns the
    sites as an ``(M, 3)`` int64 array in lexicographic order and the summed
    charge per site.  With ``extra="centroid"`` a third value holds the mean
    ``(x, y, z)`` of the points in each site.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ShapeError(f"points must be (n, 4), got {pts.shape}")
    if len(pts) == 0:
        raise EmptyEvent("cannot quantize an event without points")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if not np.isfinite(pts).all():
        raise InvalidPoint("non-finite coordinate or charge")
    cells = np.floor(pts[:, :3] / voxel_size).astype(np.int64)
    check_range(cells)
    sites, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    charge = np.bincount(inverse, weights=pts[:, 3], minlength=len(sites))
    if extra == "centroid":
        counts = np.bincount(inverse, minlength=len(sites)).astype(np.float64)
        centroid = np.stack(
            [np.bincount(inverse, weights=pts[:, a], minlength=len(sites)) / counts for a in range(3)],
            axis=1,
        )
        return sites, charge, centroid
    return sites, charge


def batch(events, dtype=None) -> SparseTensor:
    """Concatenate per-event ``(coords, feats)`` with a prepended batch index.

    No padding: the output has exactly ``sum(len(coords_e))`` rows.
    """
    if len(events) == 0:
        raise EmptyEvent("empty batch")
    coords, feats = [], []
    width = None
    for b, (c, f) in enumerate(events):
        c = np.asarray(c, dtype=np.int64)
        f = np.asarray(f)
        if f.ndim == 1:
            f = f[:, None]
        if len(c) == 0:
            raise EmptyEvent(f"event {b} has no sites")
        if len(f) != len(c):
            raise ShapeError(f"event {b}: {len(c)} sites but {len(f)} feature rows")
        if width is None:
            width = f.shape[1]
        elif f.shape[1] != width:
            raise ShapeError(f"event {b} has feature width {f.shape[1]}, expected {width}")
        coords.append(np.column_stack([np.full(len(c), b, dtype=np.int64), c]))
        feats.append(f)
    all_coords = np.concatenate(coords)
    check_range(all_coords)
    all_feats = np.concatenate(feats)
    if dtype is not None:
        all_feats = all_feats.astype(dtype, copy=False)
    # per-event input may be unsorted; keep the lexicographic invariant
    keys = pack_keys(all_coords)
    if np.any(np.diff(keys) <= 0):
        order = np.argsort(keys, kind="stable")
        if np.any(np.diff(keys[order]) == 0):
            raise ShapeError("duplicate coordinates within an event")
        all_coords, all_feats = all_coords[order], all_feats[order]
    return SparseTensor(np.ascontiguousarray(all_coords), np.ascontiguousarray(all_feats), 1, len(events))


def coarse_coords(coords: np.ndarray, step: int) -> np.ndarray:
    """Unique ``floor(c / step) * step`` over spatial axes, lexicographic."""
    if step == 1:
        return coords
    c = coords.copy()
    c[:, 1:] = np.floor_divide(c[:, 1:], step) * step
    keys = np.unique(pack_keys(c))
    return unpack_keys(keys)


def _build(coords: np.ndarray, in_stride: int, offsets_unit: np.ndarray, stride: int) -> KernelMap:
    out_stride = in_stride * stride
    out_coords = coarse_coords(coords, out_stride)
    offsets = np.ascontiguousarray(offsets_unit * in_stride, dtype=np.int64)
    in_rows, out_rows, ptr = kernels.kernel_pairs(
        np.ascontiguousarray(coords), np.ascontiguousarray(out_coords), offsets
    )
    return KernelMap(offsets, in_rows, out_rows, ptr, out_coords, in_stride, out_stride, len(coords))


def build_kernel_map(x: SparseTensor, kernel_size: int = 3, stride: int = 1) -> KernelMap:
    """Kernel map for a ``kernel_size``^3 convolution (3 or 1) at the given stride.

    Offset ``o`` pairs input ``p`` with output ``q`` exactly when
    ``coord(p) == coord(q) + o * tensor_stride``.
    """
    if kernel_size == 3:
        unit = CUBE3
    elif kernel_size == 1:
        unit = CENTER
    else:
        raise ValueError("kernel_size must be 3 or 1")
    if stride < 1:
        raise ValueError("stride must be positive")
    return _build(x.coords, x.stride, unit, stride)


def pool_map(x: SparseTensor, kernel_size: int = 2, stride: int = 2) -> KernelMap:
    """Kernel map for 2^3 max pooling: offsets {0,1}^3 onto the coarse lattice."""
    if kernel_size != 2 or stride != 2:
        raise ValueError("only 2^3 pooling with stride 2 is supported")
    return _build(x.coords, x.stride, CUBE2, stride)
