"""Point clouds, voxelization and the factor-2 occupancy pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coords import CoordSet, pack
from .errors import EmptyInput, InvalidConfig, InvalidPoint, InvalidScale

BASE_VOXEL_SIZE = 0.05
NUM_SCALES = 4
CLIP_RANGE = ((-51.2, -51.2, -5.0), (51.2, 51.2, 3.0))

_BELOW_ONE = np.nextafter(1.0, 0.0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of points; ``xyz`` is (N, 3) in meters."""

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    frame_id: str | None = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must have shape (N, 3), got {xyz.shape}")
        if xyz.shape[0] >= 2**31:
            raise ValueError("point count exceeds 32-bit index range")
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            inten = np.asarray(self.intensity).reshape(-1)
            if inten.shape[0] != xyz.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def take(self, index) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[index]
        return PointCloud(self.xyz[index], inten, self.frame_id)


@dataclass(frozen=True, eq=False)
class SparseOccupancy:
    """Occupied voxels at one scale with (point count, centroid offset) payloads.

    ``offsets`` are centroid positions inside the voxel in voxel units, each
    component in [0, 1).
    """

    scale: int
    base_size: float
    coords: CoordSet
    counts: np.ndarray
    offsets: np.ndarray

    @property
    def voxel_size(self) -> float:
        return self.base_size * 2.0**self.scale

    def __len__(self) -> int:
        return len(self.coords)

    def __contains__(self, ijk) -> bool:
        return ijk in self.coords

    def select(self, mask: np.ndarray) -> "SparseOccupancy":
        return SparseOccupancy(self.scale, self.base_size, self.coords.subset(mask),
                               self.counts[mask], self.offsets[mask])

    def same_as(self, other: "SparseOccupancy") -> bool:
        return (self.scale == other.scale and self.base_size == other.base_size
                and self.coords == other.coords
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.offsets, other.offsets))


@dataclass(frozen=True, eq=False)
class VoxelPyramid:
    levels: tuple[SparseOccupancy, ...]
    base_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def num_scales(self) -> int:
        return len(self.levels)

    def __getitem__(self, s: int) -> SparseOccupancy:
        return self.levels[s]

    def check_scale(self, s: int) -> None:
        if not 0 <= s < self.num_scales:
            raise InvalidScale(f"scale {s} outside [0, {self.num_scales - 1}]")


def voxelize(cloud: PointCloud, base_size: float = BASE_VOXEL_SIZE,
             origin=(0.0, 0.0, 0.0)) -> tuple[SparseOccupancy, np.ndarray]:
    """Voxelize ``cloud`` at scale 0.

    Returns the occupancy and, for every input point, the row of its voxel.
    Payload sums run in a canonical point order so the result does not
    depend on the input order.
    """
    if base_size <= 0:
        raise InvalidConfig("base_size must be positive")
    if len(cloud) == 0:
        raise EmptyInput("cannot voxelize an empty point cloud")
    xyz = np.asarray(cloud.xyz, dtype=np.float64)
    if not np.isfinite(xyz).all():
        raise InvalidPoint("point cloud contains non-finite coordinates")
    rel = (xyz - np.asarray(origin, dtype=np.float64)) / base_size
    cell = np.floor(rel)
    ijk = cell.astype(np.int64)
    frac = rel - cell
    keys = pack(ijk)
    order = np.lexsort((frac[:, 2], frac[:, 1], frac[:, 0], keys))
    skeys = keys[order]
    starts = np.flatnonzero(np.r_[True, skeys[1:] != skeys[:-1]])
    counts = np.diff(np.r_[starts, skeys.shape[0]])
    sums = np.add.reduceat(frac[order], starts, axis=0)
    offs = np.clip(sums / counts[:, None], 0.0, _BELOW_ONE)
    coords = CoordSet.from_keys(skeys[starts])
    point_voxel = np.empty(len(cloud), dtype=np.int64)
    point_voxel[order] = np.repeat(np.arange(starts.shape[0]), counts)
    occ = SparseOccupancy(0, float(base_size), coords, counts.astype(np.int64), offs)
    return occ, point_voxel


def pool_occupancy(level: SparseOccupancy) -> SparseOccupancy:
    """Exact factor-2 pooling: counts summed, centroids count-weighted."""
    c = level.coords.coords
    parent = np.floor_divide(c, 2)
    pos = (c + level.offsets) / 2.0 - parent  # centroid in parent voxel units
    keys = pack(parent)
    # level coords are sorted, but parent keys are not; a stable sort keeps
    # the accumulation order a function of the coordinate set alone
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    starts = np.flatnonzero(np.r_[True, skeys[1:] != skeys[:-1]])
    w = level.counts[order].astype(np.float64)
    counts = np.add.reduceat(level.counts[order], starts)
    sums = np.add.reduceat(pos[order] * w[:, None], starts, axis=0)
    offs = np.clip(sums / counts[:, None], 0.0, _BELOW_ONE)
    return SparseOccupancy(level.scale + 1, level.base_size,
                           CoordSet.from_keys(skeys[starts]), counts, offs)


def build_pyramid(finest: SparseOccupancy, num_scales: int = NUM_SCALES,
                  origin=(0.0, 0.0, 0.0)) -> VoxelPyramid:
    if num_scales < 1:
        raise InvalidConfig("num_scales must be >= 1")
    if finest.scale != 0:
        raise InvalidScale("pyramid must be built from scale 0")
    levels = [finest]
    for _ in range(num_scales - 1):
        levels.append(pool_occupancy(levels[-1]))
    return VoxelPyramid(tuple(levels), finest.base_size, np.asarray(origin, dtype=np.float64))


def parent(ijk, scale: int, num_scales: int) -> tuple[tuple[int, int, int], int]:
    """Parent of voxel ``ijk`` at ``scale``: floor-halved, one scale coarser."""
    if not 0 <= scale < num_scales - 1:
        raise InvalidScale(f"voxel at scale {scale} has no parent in a {num_scales}-scale pyramid")
    i, j, k = (int(v) for v in ijk)
    return (i // 2, j // 2, k // 2), scale + 1


def children_occupied(ijk, scale: int, pyramid: VoxelPyramid) -> set[tuple[int, int, int]]:
    if not 1 <= scale < pyramid.num_scales:
        raise InvalidScale(f"voxel at scale {scale} has no children")
    i, j, k = (int(v) for v in ijk)
    fine = pyramid[scale - 1].coords
    out = set()
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                child = (2 * i + a, 2 * j + b, 2 * k + c)
                if child in fine:
                    out.add(child)
    return out


def clip_range(cloud: PointCloud, lo=CLIP_RANGE[0], hi=CLIP_RANGE[1]) -> PointCloud:
    """Keep points with lo <= p < hi on every axis, preserving order."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not (lo < hi).all():
        raise InvalidConfig("clip range requires min < max on every axis")
    keep = np.all((cloud.xyz >= lo) & (cloud.xyz < hi), axis=1)
    return cloud.take(keep)


def voxelize_pyramid(cloud: PointCloud, base_size: float = BASE_VOXEL_SIZE,
                     num_scales: int = NUM_SCALES, origin=(0.0, 0.0, 0.0)) -> VoxelPyramid:
    finest, _ = voxelize(cloud, base_size, origin)
    return build_pyramid(finest, num_scales, origin)
