"""Differentiable operations on sparse feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..coords import CoordSet
from ..errors import AlignmentError, CoverageError, MissingParent, ShapeError
from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True, eq=False)
class SparseFeatureMap:
    """Features (rows aligned with sorted ``coords``) at one scale."""

    coords: CoordSet
    features: Tensor
    scale: int = 0

    def __post_init__(self):
        if self.features.shape[0] != len(self.coords):
            raise ShapeError(f"{self.features.shape[0]} feature rows for {len(self.coords)} coords")

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "SparseFeatureMap":
        return SparseFeatureMap(self.coords, features, self.scale)


def num_taps(reach: int) -> int:
    return (2 * reach + 1) ** 3


def _reach_of(w: Tensor) -> int:
    k = w.shape[0]
    side = round(k ** (1 / 3))
    if side**3 != k or side % 2 == 0:
        raise ShapeError(f"kernel with {k} taps is not an odd cube")
    return (side - 1) // 2


def _conv(x: SparseFeatureMap, out: CoordSet, w: Tensor, b: Tensor | None) -> SparseFeatureMap:
    reach = _reach_of(w)
    if w.shape[1] != x.channels:
        raise ShapeError(f"kernel expects {w.shape[1]} channels, map has {x.channels}")
    pairs = x.coords.kernel_pairs(out, reach)
    y = ag.conv_pairs(x.features, w, pairs, len(out))
    if b is not None:
        y = ag.add_bias(y, b)
    return SparseFeatureMap(out, y, x.scale)


def submanifold_conv(x: SparseFeatureMap, w: Tensor, b: Tensor | None = None) -> SparseFeatureMap:
    """y[v] = sum over |d|_inf <= reach of w[d] x[v + d], on the input coords only."""
    return _conv(x, x.coords, w, b)


def expansion_conv(x: SparseFeatureMap, w: Tensor, b: Tensor | None = None) -> SparseFeatureMap:
    """Same sum, evaluated on the input coords dilated by the kernel reach."""
    return _conv(x, x.coords.dilate(_reach_of(w)), w, b)


def pool_down(x: SparseFeatureMap) -> SparseFeatureMap:
    parents = x.coords.halve()
    seg = x.coords.parent_rows()
    return SparseFeatureMap(parents, ag.segment_mean(x.features, seg, len(parents)), x.scale + 1)


def unpool_up(coarse: SparseFeatureMap, target: CoordSet) -> SparseFeatureMap:
    """Broadcast each coarse feature to the target coords it contains."""
    idx = coarse.coords.index(np.floor_divide(target.coords, 2))
    if (idx < 0).any():
        raise MissingParent(f"{int((idx < 0).sum())} target coords have no parent in the coarse map")
    return SparseFeatureMap(target, ag.gather_rows(coarse.features, idx), coarse.scale - 1)


def linear(x: SparseFeatureMap, w: Tensor, b: Tensor | None = None) -> SparseFeatureMap:
    y = ag.matmul(x.features, w)
    if b is not None:
        y = ag.add_bias(y, b)
    return x.with_features(y)


def relu(x: SparseFeatureMap) -> SparseFeatureMap:
    return x.with_features(ag.relu(x.features))


def gelu(x: SparseFeatureMap) -> SparseFeatureMap:
    return x.with_features(ag.gelu(x.features))


def _aligned(a: SparseFeatureMap, b: SparseFeatureMap) -> None:
    if a.coords is not b.coords and a.coords != b.coords:
        raise AlignmentError("feature maps live on different coordinate sets")


def add(a: SparseFeatureMap, b: SparseFeatureMap) -> SparseFeatureMap:
    _aligned(a, b)
    return a.with_features(ag.add(a.features, b.features))


def concat(a: SparseFeatureMap, b: SparseFeatureMap) -> SparseFeatureMap:
    _aligned(a, b)
    return a.with_features(ag.concat(a.features, b.features))


def embed(x: SparseFeatureMap, superset: CoordSet, fill: Tensor) -> SparseFeatureMap:
    """Place ``x`` onto a coordinate superset; new coords get the ``fill`` vector."""
    dst = superset.index_keys(x.coords.keys)
    if (dst < 0).any():
        raise CoverageError("superset does not contain every coordinate of the map")
    return SparseFeatureMap(superset, ag.fill_rows(x.features, dst, len(superset), fill), x.scale)


def select(x: SparseFeatureMap, target: CoordSet) -> SparseFeatureMap:
    """Restrict ``x`` to ``target`` (must be covered)."""
    idx = x.coords.index_keys(target.keys)
    missing = int((idx < 0).sum())
    if missing:
        raise CoverageError(f"{missing} target coords lie outside the active set")
    return SparseFeatureMap(target, ag.gather_rows(x.features, idx), x.scale)


def bce_with_logits(logits: SparseFeatureMap, labels: np.ndarray, coords: CoordSet | None = None) -> Tensor:
    if coords is not None:
        _aligned(logits, SparseFeatureMap(coords, ag.constant(np.zeros((len(coords), 0)))))
    if logits.features.shape[0] != np.asarray(labels).shape[0]:
        raise AlignmentError("labels do not align with logits")
    return ag.bce_with_logits(logits.features, labels)
