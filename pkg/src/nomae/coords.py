"""Packed integer keys for voxel coordinates.

A coordinate ``(i, j, k)`` is packed into one int64 with 21 bits per axis.
Packing is monotone in lexicographic order, so sorting keys sorts
coordinates lexicographically and ``np.searchsorted`` gives vectorized
membership tests.
"""

from __future__ import annotations

import numpy as np

BITS = 21
OFFSET = 1 << (BITS - 1)
LIMIT = OFFSET - 1
_MASK = (1 << BITS) - 1


def pack(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (c.min() < -OFFSET or c.max() > LIMIT):
        raise OverflowError("voxel coordinate outside the packable range")
    u = c + OFFSET
    return (u[:, 0] << (2 * BITS)) | (u[:, 1] << BITS) | u[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    out = np.empty((k.shape[0], 3), dtype=np.int64)
    out[:, 0] = (k >> (2 * BITS)) & _MASK
    out[:, 1] = (k >> BITS) & _MASK
    out[:, 2] = k & _MASK
    return out - OFFSET


def offsets(reach: int) -> np.ndarray:
    """All integer offsets with Chebyshev norm <= reach, lexicographic order."""
    r = np.arange(-reach, reach + 1, dtype=np.int64)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index of each query key in ``sorted_keys``, or -1 when absent."""
    if sorted_keys.shape[0] == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, sorted_keys.shape[0] - 1)
    hit = sorted_keys[pos_c] == query
    return np.where(hit, pos_c, -1)


class CoordSet:
    """Immutable, lexicographically sorted set of unique voxel coordinates."""

    __slots__ = ("coords", "keys", "_members", "_cache", "__weakref__")

    def __init__(self, coords: np.ndarray, *, _sorted_unique: bool = False):
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = pack(c)
        if not _sorted_unique:
            keys = np.unique(keys)
            c = unpack(keys)
        c.setflags(write=False)
        keys.setflags(write=False)
        self.coords = c
        self.keys = keys
        self._members = None
        self._cache = {}

    @classmethod
    def from_keys(cls, keys: np.ndarray) -> "CoordSet":
        keys = np.unique(np.asarray(keys, dtype=np.int64))
        return cls(unpack(keys), _sorted_unique=True)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def __contains__(self, ijk) -> bool:
        if self._members is None:
            self._members = frozenset(self.keys.tolist())
        return int(pack(np.asarray(ijk))[0]) in self._members

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoordSet):
            return NotImplemented
        return np.array_equal(self.keys, other.keys)

    def __hash__(self):
        return hash(self.keys.tobytes())

    def __repr__(self) -> str:
        return f"CoordSet(n={len(self)})"

    def index(self, coords: np.ndarray) -> np.ndarray:
        return lookup(self.keys, pack(coords))

    def index_keys(self, keys: np.ndarray) -> np.ndarray:
        return lookup(self.keys, keys)

    def isin(self, other: "CoordSet") -> np.ndarray:
        """Boolean mask over ``self`` of members also present in ``other``."""
        return lookup(other.keys, self.keys) >= 0

    def union(self, other: "CoordSet") -> "CoordSet":
        return CoordSet.from_keys(np.union1d(self.keys, other.keys))

    def difference(self, other: "CoordSet") -> "CoordSet":
        return CoordSet(self.coords[~self.isin(other)], _sorted_unique=True)

    def intersection(self, other: "CoordSet") -> "CoordSet":
        return CoordSet(self.coords[self.isin(other)], _sorted_unique=True)

    def subset(self, mask: np.ndarray) -> "CoordSet":
        return CoordSet(self.coords[mask], _sorted_unique=True)

    def halve(self) -> "CoordSet":
        """Floor-halved coordinates (one scale coarser); memoized."""
        hit = self._cache.get("halve")
        if hit is None:
            hit = self._cache["halve"] = CoordSet(np.floor_divide(self.coords, 2))
        return hit

    def parent_rows(self) -> np.ndarray:
        """Row of each coordinate's parent inside ``self.halve()``."""
        hit = self._cache.get("parent_rows")
        if hit is None:
            hit = self._cache["parent_rows"] = self.halve().index(np.floor_divide(self.coords, 2))
        return hit

    def translate(self, delta) -> "CoordSet":
        return CoordSet(self.coords + np.asarray(delta, dtype=np.int64), _sorted_unique=True)

    def dilate(self, reach: int) -> "CoordSet":
        """Union of Chebyshev balls of radius ``reach``, including ``self``."""
        if reach == 0 or len(self) == 0:
            return self
        hit = self._cache.get(("dilate", reach))
        if hit is not None:
            return hit
        # separable: a cube is the product of three 1-D intervals
        c = self.coords
        for axis in range(3):
            shift = np.zeros((2 * reach + 1, 3), dtype=np.int64)
            shift[:, axis] = np.arange(-reach, reach + 1)
            keys = np.unique(pack((c[None, :, :] + shift[:, None, :]).reshape(-1, 3)))
            c = unpack(keys)
        out = self._cache[("dilate", reach)] = CoordSet(c, _sorted_unique=True)
        return out

    def kernel_pairs(self, out: "CoordSet", reach: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        """Per-tap rulebook: for tap ``t``, output rows ``u`` and input rows ``v`` with
        ``out[u] + offsets(reach)[t] == self[v]``.

        Rows are increasing within a tap and each output appears at most once
        per tap.  Memoized per (out, reach).
        """
        key = ("pairs", id(out), reach)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is out:
            return hit[1]
        offs = offsets(reach)
        pairs = []
        empty = np.zeros(0, dtype=np.int64)
        if len(out) == 0 or len(self) == 0:
            pairs = [(empty, empty)] * offs.shape[0]
        else:
            lo, hi = out.coords.min(axis=0) - reach, out.coords.max(axis=0) + reach
            if lo.min() < -OFFSET or hi.max() > LIMIT:
                raise OverflowError("voxel coordinate outside the packable range")
            # packing is linear while every field stays in range, so each tap is
            # a constant key shift and the shifted query stays sorted
            dkeys = (offs[:, 0] << (2 * BITS)) + (offs[:, 1] << BITS) + offs[:, 2]
            last = len(self) - 1
            for dk in dkeys:
                q = out.keys + dk
                pos = np.minimum(np.searchsorted(self.keys, q), last)
                u = np.flatnonzero(self.keys[pos] == q)
                pairs.append((u, pos[u]))
        pairs = tuple(pairs)
        self._cache[key] = (out, pairs)
        return pairs
