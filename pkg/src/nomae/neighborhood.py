"""Reconstruction domains around visible voxels and their occupancy labels."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .coords import CoordSet
from .errors import EmptyInput, InvalidConfig
from .geometry import VoxelPyramid
from .masking import MaskAssignment

DEFAULT_SIDE = 9
SWEEP_SIDES = (3, 5, 7, 9, 11, 13)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Cube side length ``n`` (odd, >= 3) per scale, in voxels of that scale."""

    sides: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sides", tuple(int(n) for n in self.sides))
        for n in self.sides:
            if n < 3 or n % 2 == 0:
                raise InvalidConfig(f"neighborhood side must be odd and >= 3, got {n}")

    @classmethod
    def uniform(cls, side: int = DEFAULT_SIDE, num_scales: int = 4) -> "NeighborhoodSpec":
        return cls((side,) * num_scales)

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    def radius(self, s: int) -> int:
        return (self.sides[s] - 1) // 2


def dilate(visible: CoordSet, radius: int) -> CoordSet:
    """Chebyshev dilation of ``visible`` by ``radius``, minus ``visible`` itself."""
    if radius < 1:
        raise InvalidConfig("dilation radius must be >= 1")
    if len(visible) == 0:
        raise EmptyInput("cannot dilate an empty visible set")
    return visible.dilate(radius).difference(visible)


@dataclass(frozen=True, eq=False)
class TargetSet:
    coords: tuple[CoordSet, ...]
    labels: tuple[np.ndarray, ...]

    @property
    def num_scales(self) -> int:
        return len(self.coords)

    def positive_fraction(self) -> float:
        n = sum(len(c) for c in self.coords)
        return sum(int(l.sum()) for l in self.labels) / n if n else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("s,i,j,k,label\n")
        for s, (c, lab) in enumerate(zip(self.coords, self.labels)):
            for (i, j, k), y in zip(c.coords.tolist(), lab.tolist()):
                buf.write(f"{s},{i},{j},{k},{y}\n")
        return buf.getvalue()


def build_targets(assignment: MaskAssignment, pyramid: VoxelPyramid,
                  spec: NeighborhoodSpec) -> TargetSet:
    S = pyramid.num_scales
    if assignment.num_scales != S or spec.num_scales != S:
        raise InvalidConfig("assignment, pyramid and neighborhood scale counts differ")
    coords, labels = [], []
    for s in range(S):
        vis = assignment.visible(s)
        if len(vis) == 0:
            raise EmptyInput(f"no visible voxel at scale {s}")
        dom = dilate(vis, spec.radius(s))
        coords.append(dom)
        labels.append(dom.isin(pyramid[s].coords).astype(np.uint8))
    return TargetSet(tuple(coords), tuple(labels))


@dataclass(frozen=True)
class Accounting:
    scale: int
    masked: int
    recovered: int
    lost: int

    @property
    def recovered_fraction(self) -> float:
        return self.recovered / self.masked if self.masked else 1.0


def recovered_lost_accounting(assignment: MaskAssignment, targets: TargetSet) -> list[Accounting]:
    if assignment.num_scales != targets.num_scales:
        raise InvalidConfig("assignment and targets scale counts differ")
    out = []
    for s in range(targets.num_scales):
        m = assignment.masked(s)
        rec = int(np.count_nonzero(m.isin(targets.coords[s])))
        out.append(Accounting(s, len(m), rec, len(m) - rec))
    return out


def lost_voxels(assignment: MaskAssignment, targets: TargetSet, s: int) -> CoordSet:
    m = assignment.masked(s)
    return m.subset(~m.isin(targets.coords[s]))
