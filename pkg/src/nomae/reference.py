"""Slow, independent oracles for the fast code paths.

Nothing here uses the packed-key coordinate sets, kernel maps or sparse
ops: coordinates are plain Python tuples and convolutions run on dense
numpy grids.  Intended for small inputs (dense extents around 32^3).
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import InvalidConfig

Coord = tuple[int, int, int]
DENSE_LIMIT = 32


def _tuples(coords) -> list[Coord]:
    if hasattr(coords, "coords"):
        coords = coords.coords
    return [tuple(int(v) for v in c) for c in np.asarray(coords).reshape(-1, 3)]


def brute_voxelize(xyz: np.ndarray, base_size: float, origin=(0.0, 0.0, 0.0)) -> dict[Coord, int]:
    """Point count per occupied voxel, one point at a time."""
    out: dict[Coord, int] = {}
    ox, oy, oz = (float(v) for v in origin)
    for x, y, z in np.asarray(xyz, dtype=np.float64).tolist():
        key = (math.floor((x - ox) / base_size), math.floor((y - oy) / base_size),
               math.floor((z - oz) / base_size))
        out[key] = out.get(key, 0) + 1
    return out


def brute_pool(coords: Iterable) -> set[Coord]:
    """Floor-halve every coordinate (one scale coarser)."""
    return {(i // 2, j // 2, k // 2) for i, j, k in _tuples(coords)}


def brute_dilate(visible: Iterable, radius: int) -> set[Coord]:
    """Chebyshev neighbours within ``radius`` of any visible voxel, minus the visible set."""
    if radius < 1:
        raise InvalidConfig("radius must be >= 1")
    vis = set(_tuples(visible))
    out = set()
    rng = range(-radius, radius + 1)
    for i, j, k in vis:
        for a in rng:
            for b in rng:
                for c in rng:
                    out.add((i + a, j + b, k + c))
    return out - vis


def chebyshev_distance_to_set(point: Coord, coords: Iterable[Coord]) -> int:
    return min(max(abs(point[0] - c[0]), abs(point[1] - c[1]), abs(point[2] - c[2])) for c in coords)


def monte_carlo_mask_ratio(pyramid, r: float, trials: int, seed: int = 0):
    """Mean and standard deviation of the HMG masked fraction per scale over repeated draws."""
    from .masking import MaskingConfig, Strategy, hmg_generate

    S = pyramid.num_scales
    ratios = np.zeros((trials, S))
    for t in range(trials):
        a = hmg_generate(pyramid, MaskingConfig(r, Strategy.HMG, seed + t))
        ratios[t] = [a.masked_flags[s].mean() for s in range(S)]
    return ratios.mean(axis=0), ratios.std(axis=0, ddof=1) if trials > 1 else np.zeros(S)


# ---------------------------------------------------------------------------
# dense convolutions


class Grid:
    """Dense box [lo, lo + shape) in the integer voxel frame of one scale."""

    def __init__(self, lo, shape):
        self.lo = np.asarray(lo, dtype=np.int64)
        self.shape = tuple(int(v) for v in shape)

    def mask(self, coords) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for c in _tuples(coords):
            m[tuple(np.asarray(c) - self.lo)] = True
        return m

    def scatter(self, coords, rows: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape + (rows.shape[1],), dtype=rows.dtype)
        for c, row in zip(_tuples(coords), rows):
            out[tuple(np.asarray(c) - self.lo)] = row
        return out

    def gather(self, coords, dense: np.ndarray) -> np.ndarray:
        return np.stack([dense[tuple(np.asarray(c) - self.lo)] for c in _tuples(coords)])


def _shifted(x: np.ndarray, d) -> np.ndarray:
    """out[p] = x[p + d] with zeros outside."""
    out = np.zeros_like(x)
    src, dst = [], []
    for n, di in zip(x.shape[:3], d):
        if di >= 0:
            src.append(slice(di, n))
            dst.append(slice(0, max(n - di, 0)))
        else:
            src.append(slice(0, n + di))
            dst.append(slice(-di, n))
    out[tuple(dst)] = x[tuple(src)]
    return out


def dense_correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """y[p] = sum_d x[p + d] @ w[d] over a cubic kernel, zero padded.

    ``w`` has shape (K, Cin, Cout) with taps in lexicographic (a, b, c) order.
    """
    k = w.shape[0]
    side = round(k ** (1 / 3))
    r = (side - 1) // 2
    y = np.zeros(x.shape[:3] + (w.shape[2],), dtype=np.result_type(x, w))
    t = 0
    for a in range(-r, r + 1):
        for b in range(-r, r + 1):
            for c in range(-r, r + 1):
                y += _shifted(x, (a, b, c)) @ w[t]
                t += 1
    return y


def dense_dilate_mask(m: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(m)
    for a in range(-radius, radius + 1):
        for b in range(-radius, radius + 1):
            for c in range(-radius, radius + 1):
                out |= _shifted(m[..., None], (a, b, c))[..., 0]
    return out


def dense_submanifold(x, m, w, b=None):
    y = dense_correlate(x * m[..., None], w)
    if b is not None:
        y = y + b
    return y * m[..., None]


def dense_expansion(x, m, w, b=None):
    side = round(w.shape[0] ** (1 / 3))
    m_out = dense_dilate_mask(m, (side - 1) // 2)
    y = dense_correlate(x * m[..., None], w)
    if b is not None:
        y = y + b
    return y * m_out[..., None], m_out


def _gelu(v):
    return 0.5 * v * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def _relu(v):
    return np.maximum(v, 0)


def _pool(x, m, fine: Grid, coarse: Grid):
    """Mean over present children, fine grid -> coarse grid (lo even)."""
    n = tuple(s // 2 for s in fine.shape)
    c = x.shape[-1]
    sums = (x * m[..., None]).reshape(n[0], 2, n[1], 2, n[2], 2, c).sum(axis=(1, 3, 5))
    cnt = m.reshape(n[0], 2, n[1], 2, n[2], 2).sum(axis=(1, 3, 5))
    off = fine.lo // 2 - coarse.lo
    xs = np.zeros(coarse.shape + (c,), dtype=x.dtype)
    ms = np.zeros(coarse.shape, dtype=bool)
    sl = tuple(slice(o, o + k) for o, k in zip(off, n))
    with np.errstate(invalid="ignore", divide="ignore"):
        xs[sl] = np.where(cnt[..., None] > 0, sums / np.maximum(cnt, 1)[..., None], 0)
    ms[sl] = cnt > 0
    return xs, ms


def _unpool(xc, coarse: Grid, fine: Grid, m_fine):
    n = tuple(s // 2 for s in fine.shape)
    off = fine.lo // 2 - coarse.lo
    sub = xc[tuple(slice(o, o + k) for o, k in zip(off, n))]
    up = sub.repeat(2, 0).repeat(2, 1).repeat(2, 2)
    return up * m_fine[..., None]


def _even_floor(v):
    return v - (v % 2)


def plan_grids(plan, radius: int) -> list[Grid]:
    """Nested boxes covering every coordinate the forward pass touches."""
    S = plan.num_scales
    req = []
    for s in range(S):
        pts = np.concatenate([np.asarray(_tuples(plan.visible[s]), dtype=np.int64).reshape(-1, 3),
                              np.asarray(_tuples(plan.targets.coords[s]), dtype=np.int64).reshape(-1, 3)])
        req.append((pts.min(axis=0) - radius - 1, pts.max(axis=0) + radius + 2))
    grids = []
    lo, hi = req[0]
    for s in range(S):
        if s:
            lo = np.minimum(req[s][0], grids[-1].lo // 2)
            hi = np.maximum(req[s][1], (grids[-1].lo + np.asarray(grids[-1].shape)) // 2)
        lo = _even_floor(lo)
        hi = hi + (hi - lo) % 2
        grids.append(Grid(lo, hi - lo))
    return grids


def dense_forward(plan, params: dict[str, np.ndarray], cfg) -> list[np.ndarray]:
    """Full pretext forward pass on dense grids; logits in target-coordinate order."""
    act = _gelu if cfg.activation == "gelu" else _relu
    S = cfg.num_scales
    R = cfg.decoder_layers * cfg.decoder_reach
    grids = plan_grids(plan, R + cfg.head_depth)
    vis0 = plan.visible_input
    feats = np.empty((len(vis0), 4), dtype=np.float64)
    feats[:, 0] = np.log1p(vis0.counts)
    feats[:, 1:] = vis0.offsets - 0.5
    g0 = grids[0]
    m = g0.mask(vis0.coords)
    x = g0.scatter(vis0.coords, feats)
    x = act(x @ params["enc.stem.w"] + params["enc.stem.b"]) * m[..., None]
    enc, masks = [], []
    for s in range(S):
        for b in range(cfg.encoder_blocks):
            name = f"enc.s{s}.block{b}"
            h = dense_submanifold(x, m, params[f"{name}.w"], params[f"{name}.b"])
            x = x + act(h) * m[..., None]
        enc.append(x)
        masks.append(m)
        if s < S - 1:
            x, m = _pool(x, m, grids[s], grids[s + 1])
            x = (x @ params[f"enc.s{s}.down.w"] + params[f"enc.s{s}.down.b"]) * m[..., None]
    fused = [None] * S
    for s in range(S - 1, -1, -1):
        x, m = enc[s], masks[s]
        if s < S - 1:
            up = _unpool(fused[s + 1], grids[s + 1], grids[s], m)
            x = np.concatenate([x, up], axis=-1)
            x = (x @ params[f"up.s{s}.proj.w"] + params[f"up.s{s}.proj.b"]) * m[..., None]
        x = dense_submanifold(x, m, params[f"up.s{s}.block.w"], params[f"up.s{s}.block.b"])
        fused[s] = act(x) * m[..., None]
    logits = []
    for s in range(S):
        g = grids[s]
        seeds = g.mask(plan.visible[s])
        extra = seeds & ~masks[s]
        x = fused[s] + extra[..., None] * params[f"dec.s{s}.fill"]
        m = seeds
        for l in range(cfg.decoder_layers):
            name = f"dec.s{s}.expand{l}"
            x, m = dense_expansion(x, m, params[f"{name}.w"], params[f"{name}.b"])
            x = act(x) * m[..., None]
        for l in range(cfg.head_depth):
            name = f"dec.s{s}.head{l}"
            x = act(dense_submanifold(x, m, params[f"{name}.w"], params[f"{name}.b"])) * m[..., None]
        z = x @ params[f"dec.s{s}.out.w"] + params[f"dec.s{s}.out.b"]
        logits.append(g.gather(plan.targets.coords[s], z)[:, 0])
    return logits
