"""Visible/masked partitions of a voxel pyramid.

Three strategies are provided:

* ``HMG``: hierarchical mask generation.  The coarsest scale is masked
  i.i.d. with per-scale ratio ``r``; at each finer scale the children of
  visible voxels are masked again with ratio ``r`` and the children of
  masked voxels stay masked.
* ``NaivePoolUp``: mask the finest scale, a coarse voxel is masked only when
  all of its occupied children are.
* ``CoarseUpsample``: mask the coarsest scale, finer voxels inherit.

Every Bernoulli draw is a counter-based hash of (seed, scale, i, j, k), so
an assignment does not depend on iteration order.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .coords import CoordSet
from .errors import EmptyInput, InvalidConfig
from .geometry import SparseOccupancy, VoxelPyramid

NUSCENES_TOTAL_RATIO = 0.70
WAYMO_TOTAL_RATIO = 0.85


class Strategy(str, enum.Enum):
    HMG = "hmg"
    NAIVE = "naive"
    UPSAMPLE = "upsample"


class RatioFormula(str, enum.Enum):
    EXTRA_ROUND = "extra_round"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class MaskingConfig:
    ratio: float
    strategy: Strategy = Strategy.HMG
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0 and not (self.ratio == 1.0 and self.strategy != Strategy.HMG):
            raise InvalidConfig(f"masking ratio must lie in [0, 1), got {self.ratio}")
        object.__setattr__(self, "strategy", Strategy(self.strategy))

    @classmethod
    def from_total(cls, total: float, num_scales: int, strategy=Strategy.HMG,
                   seed: int = 0) -> "MaskingConfig":
        """Config whose finest-scale total masking ratio is ``total``.

        HMG applies one Bernoulli round per scale, so the per-scale ratio is
        the inverse of ``1 - (1 - r)**num_scales``.  The two baselines apply
        ``total`` directly at their seeding scale.
        """
        strategy = Strategy(strategy)
        if strategy == Strategy.HMG:
            return cls(per_scale_ratio(total, num_scales), strategy, seed)
        return cls(total, strategy, seed)


def per_scale_ratio(total: float, num_scales: int) -> float:
    if not 0.0 <= total < 1.0:
        raise InvalidConfig(f"total ratio must lie in [0, 1), got {total}")
    return 1.0 - (1.0 - total) ** (1.0 / num_scales)


def expected_total_ratio(r: float, num_scales: int, scale: int,
                         variant: RatioFormula = RatioFormula.SIMULATED) -> float:
    """Predicted total masked fraction at ``scale`` for per-scale ratio ``r``.

    ``SIMULATED`` counts the rounds HMG actually applies (scales S-1 down to
    ``scale``); ``EXTRA_ROUND`` is the closed form that counts one extra round.
    """
    if not 0.0 <= r < 1.0:
        raise InvalidConfig(f"r must lie in [0, 1), got {r}")
    if not 0 <= scale < num_scales:
        raise InvalidConfig(f"scale {scale} outside [0, {num_scales})")
    variant = RatioFormula(variant)
    rounds = num_scales - scale + (1 if variant == RatioFormula.EXTRA_ROUND else 0)
    return 1.0 - (1.0 - r) ** rounds


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def uniform_hash(seed: int, scale: int, coords: CoordSet) -> np.ndarray:
    """Uniform [0, 1) value per voxel, a pure function of (seed, scale, ijk)."""
    with np.errstate(over="ignore"):
        base = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.uint64(scale + 1))
        h = _mix(base ^ coords.keys.astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True, eq=False)
class MaskAssignment:
    """Per-scale masked flags aligned with the pyramid's coordinate rows."""

    masked_flags: tuple[np.ndarray, ...]
    coords: tuple[CoordSet, ...]

    @property
    def num_scales(self) -> int:
        return len(self.masked_flags)

    def visible(self, s: int) -> CoordSet:
        return self.coords[s].subset(~self.masked_flags[s])

    def masked(self, s: int) -> CoordSet:
        return self.coords[s].subset(self.masked_flags[s])

    def translate(self, delta_finest) -> "MaskAssignment":
        """Shift by an integer finest-scale offset divisible by 2**(S-1)."""
        d = np.asarray(delta_finest, dtype=np.int64)
        coords = []
        for s, c in enumerate(self.coords):
            step = 1 << s
            if (d % step).any():
                raise InvalidConfig("translation must be a multiple of the coarsest voxel")
            coords.append(c.translate(d // step))
        return MaskAssignment(self.masked_flags, tuple(coords))


def _parent_rows(pyramid: VoxelPyramid, s: int) -> np.ndarray:
    """Row in level s+1 of the parent of every row in level s."""
    return pyramid[s + 1].coords.index(np.floor_divide(pyramid[s].coords.coords, 2))


def _check(pyramid: VoxelPyramid) -> None:
    for s, lvl in enumerate(pyramid.levels):
        if len(lvl) == 0:
            raise EmptyInput(f"pyramid level {s} is empty")


def hmg_generate(pyramid: VoxelPyramid, cfg: MaskingConfig) -> MaskAssignment:
    _check(pyramid)
    S = pyramid.num_scales
    flags: list[np.ndarray] = [None] * S
    top = S - 1
    flags[top] = uniform_hash(cfg.seed, top, pyramid[top].coords) < cfg.ratio
    for s in range(S - 2, -1, -1):
        inherited = flags[s + 1][_parent_rows(pyramid, s)]
        drawn = uniform_hash(cfg.seed, s, pyramid[s].coords) < cfg.ratio
        flags[s] = inherited | drawn
    return MaskAssignment(tuple(flags), tuple(l.coords for l in pyramid.levels))


def naive_generate(pyramid: VoxelPyramid, cfg: MaskingConfig) -> MaskAssignment:
    _check(pyramid)
    S = pyramid.num_scales
    flags = [uniform_hash(cfg.seed, 0, pyramid[0].coords) < cfg.ratio]
    for s in range(S - 1):
        parent = _parent_rows(pyramid, s)
        n_parent = len(pyramid[s + 1])
        children = np.bincount(parent, minlength=n_parent)
        masked_children = np.bincount(parent, weights=flags[s], minlength=n_parent)
        flags.append(masked_children == children)
    return MaskAssignment(tuple(flags), tuple(l.coords for l in pyramid.levels))


def upsample_generate(pyramid: VoxelPyramid, cfg: MaskingConfig) -> MaskAssignment:
    _check(pyramid)
    S = pyramid.num_scales
    flags: list[np.ndarray] = [None] * S
    flags[S - 1] = uniform_hash(cfg.seed, S - 1, pyramid[S - 1].coords) < cfg.ratio
    for s in range(S - 2, -1, -1):
        flags[s] = flags[s + 1][_parent_rows(pyramid, s)]
    return MaskAssignment(tuple(flags), tuple(l.coords for l in pyramid.levels))


def generate(pyramid: VoxelPyramid, cfg: MaskingConfig) -> MaskAssignment:
    return {
        Strategy.HMG: hmg_generate,
        Strategy.NAIVE: naive_generate,
        Strategy.UPSAMPLE: upsample_generate,
    }[cfg.strategy](pyramid, cfg)


def consistency_violations(assignment: MaskAssignment, pyramid: VoxelPyramid) -> int:
    """Number of voxels visible at scale s whose parent is masked at s+1."""
    bad = 0
    for s in range(assignment.num_scales - 1):
        parent_masked = assignment.masked_flags[s + 1][_parent_rows(pyramid, s)]
        bad += int(np.count_nonzero(parent_masked & ~assignment.masked_flags[s]))
    return bad


@dataclass(frozen=True)
class ScaleMaskStats:
    scale: int
    occupied: int
    masked: int
    ratio: float
    extra_round: float | None
    simulated: float | None


@dataclass(frozen=True)
class MaskReport:
    rows: tuple[ScaleMaskStats, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("scale,occupied,masked,ratio,extra_round,simulated\n")
        for r in self.rows:
            buf.write(f"{r.scale},{r.occupied},{r.masked},{r.ratio:.6f},"
                      f"{_fmt(r.extra_round)},{_fmt(r.simulated)}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            lines.append(f"scale {r.scale}: occupied={r.occupied} masked={r.masked} "
                         f"ratio={r.ratio:.4f} extra_round={_fmt(r.extra_round)} "
                         f"simulated={_fmt(r.simulated)}")
        return "\n".join(lines) + "\n"


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def mask_stats(assignment: MaskAssignment, pyramid: VoxelPyramid,
               r: float | None = None) -> MaskReport:
    """Per-scale masked counts; ``r`` adds both closed-form predictions."""
    if assignment.num_scales != pyramid.num_scales:
        raise InvalidConfig("assignment and pyramid scale counts differ")
    S = pyramid.num_scales
    rows = []
    for s in range(S):
        if assignment.masked_flags[s].shape[0] != len(pyramid[s]):
            raise InvalidConfig(f"assignment rows do not match pyramid level {s}")
        occ = len(pyramid[s])
        m = int(np.count_nonzero(assignment.masked_flags[s]))
        extra = sim = None
        if r is not None:
            extra = expected_total_ratio(r, S, s, RatioFormula.EXTRA_ROUND)
            sim = expected_total_ratio(r, S, s, RatioFormula.SIMULATED)
        rows.append(ScaleMaskStats(s, occ, m, m / occ if occ else 0.0, extra, sim))
    return MaskReport(tuple(rows))


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def encoder_input(assignment: MaskAssignment, pyramid: VoxelPyramid) -> SparseOccupancy:
    """Finest-scale visible voxels with their payloads."""
    keep = ~assignment.masked_flags[0]
    if not keep.any():
        raise EmptyInput("no visible voxel at the finest scale")
    return pyramid[0].select(keep)
