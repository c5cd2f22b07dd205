"""Central finite-difference checks for every differentiable op and the full model.

All checks run in float64.  Each case exposes its leaf tensors and a closure
that rebuilds the scalar probe from the current leaf values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .coords import CoordSet
from .errors import EmptyInput
from .geometry import PointCloud, voxelize_pyramid
from .masking import MaskingConfig, Strategy, encoder_input, generate, per_scale_ratio
from .model import ModelConfig, PretextModel, ScenePlan, batch_loss
from .neighborhood import build_targets
from .sparsenn import autograd as ag
from .sparsenn import ops
from .sparsenn.autograd import Tensor, backward, parameter
from .sparsenn.ops import SparseFeatureMap

EPS = 1e-4
REL_TOL = 1e-4
FLOOR = 1e-6  # denominators below this are treated as absolute errors
MAX_ACTIVE = 200


@dataclass
class Case:
    name: str
    leaves: list[Tensor]
    probe: Callable[[], Tensor]
    sample: int | None = None  # entries checked per leaf, None = all


@dataclass(frozen=True)
class CheckResult:
    name: str
    checked: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < REL_TOL


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def run_case(case: Case, eps: float = EPS, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for t in case.leaves:
        t.grad = None
    backward(case.probe())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in case.leaves]
    worst, checked = 0.0, 0
    for t, g in zip(case.leaves, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if case.sample is not None and flat.size > case.sample:
            idx = rng.choice(flat.size, case.sample, replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = float(case.probe().data)
            flat[i] = keep - eps
            down = float(case.probe().data)
            flat[i] = keep
            num = (up - down) / (2 * eps)
            worst = max(worst, float(rel_error(g.reshape(-1)[i], num)))
            checked += 1
    return CheckResult(case.name, checked, worst)


# ---------------------------------------------------------------------------
# random instances


def random_coords(rng: np.random.Generator, n: int, extent: int = 8) -> CoordSet:
    keys = rng.choice(extent**3, size=min(n, extent**3), replace=False)
    ijk = np.stack(np.unravel_index(keys, (extent,) * 3), axis=1) - extent // 2
    return CoordSet(ijk)


def _feat(rng, coords: CoordSet, c: int, name: str, away_from_zero: bool = False) -> SparseFeatureMap:
    data = rng.normal(size=(len(coords), c))
    if away_from_zero:
        data += np.sign(data) * 0.1
    return SparseFeatureMap(coords, parameter(data, name))


def _wsum(build: Callable[[], SparseFeatureMap], rng) -> Callable[[], Tensor]:
    """Scalar probe sum(out * w) with fixed random weights."""
    out = build()
    w = rng.normal(size=out.features.shape)
    return lambda: ag.weighted_sum(build().features, w)


def op_cases(seed: int = 0, n_active: int = 60) -> list[Case]:
    rng = np.random.default_rng(seed)
    n = min(n_active, MAX_ACTIVE)
    c = random_coords(rng, n)
    cases = []

    x = _feat(rng, c, 3, "x")
    w = parameter(rng.normal(size=(3, 4)), "w")
    b = parameter(rng.normal(size=4), "b")
    cases.append(Case("linear", [x.features, w, b], _wsum(lambda: ops.linear(x, w, b), rng)))

    x2 = _feat(rng, c, 3, "x2")
    cases.append(Case("add", [x.features, x2.features], _wsum(lambda: ops.add(x, x2), rng)))
    cases.append(Case("concat", [x.features, x2.features], _wsum(lambda: ops.concat(x, x2), rng)))

    xr = _feat(rng, c, 3, "xr", away_from_zero=True)
    cases.append(Case("relu", [xr.features], _wsum(lambda: ops.relu(xr), rng)))
    cases.append(Case("gelu", [x.features], _wsum(lambda: ops.gelu(x), rng)))

    for reach in (1, 2):
        k = (2 * reach + 1) ** 3
        wk = parameter(rng.normal(size=(k, 3, 2)) / np.sqrt(k), f"w{reach}")
        bk = parameter(rng.normal(size=2), f"b{reach}")
        cases.append(Case(f"submanifold_conv_r{reach}", [x.features, wk, bk],
                          _wsum(lambda wk=wk, bk=bk: ops.submanifold_conv(x, wk, bk), rng)))
        cases.append(Case(f"expansion_conv_r{reach}", [x.features, wk, bk],
                          _wsum(lambda wk=wk, bk=bk: ops.expansion_conv(x, wk, bk), rng)))

    cases.append(Case("pool_down", [x.features], _wsum(lambda: ops.pool_down(x), rng)))
    coarse = _feat(rng, c.halve(), 3, "coarse")
    cases.append(Case("unpool_up", [coarse.features], _wsum(lambda: ops.unpool_up(coarse, c), rng)))

    sup = c.dilate(1)
    fill = parameter(rng.normal(size=3), "fill")
    cases.append(Case("embed", [x.features, fill], _wsum(lambda: ops.embed(x, sup, fill), rng)))
    sub = c.subset(rng.random(len(c)) < 0.5)
    cases.append(Case("select", [x.features], _wsum(lambda: ops.select(x, sub), rng)))

    z = _feat(rng, c, 1, "z")
    y = (rng.random(len(c)) < 0.3).astype(np.uint8)
    cases.append(Case("bce_with_logits", [z.features], lambda: ops.bce_with_logits(z, y)))
    return cases


def small_plan(seed: int = 0, n_voxels: int = 160, extent: int = 12, total_ratio: float = 0.3,
               num_scales: int = 4, side: int = 9, strategy=Strategy.HMG) -> ScenePlan:
    """A random masked scene whose finest occupancy fits in ``extent``^3 voxels."""
    from .neighborhood import NeighborhoodSpec

    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        c = random_coords(rng, n_voxels, extent)
        xyz = (c.coords + rng.uniform(0.05, 0.95, size=c.coords.shape)) * 0.05
        pyr = voxelize_pyramid(PointCloud(xyz), 0.05, num_scales)
        cfg = MaskingConfig(per_scale_ratio(total_ratio, num_scales), strategy, seed + attempt)
        asg = generate(pyr, cfg)
        try:
            tgt = build_targets(asg, pyr, NeighborhoodSpec.uniform(side, num_scales))
            return ScenePlan.build(encoder_input(asg, pyr), asg, tgt)
        except EmptyInput:
            continue
    raise EmptyInput("could not draw a scene with visible voxels at every scale")


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(channels=(4, 4, 4, 4), decoder_channels=(3, 3, 3, 3), dtype="float64", encoder_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


def model_case(seed: int = 0, sample: int = 3, **cfg_kw) -> Case:
    cfg = tiny_model_config(**cfg_kw)
    model = PretextModel(cfg, seed=seed)
    plan = small_plan(seed, side=cfg.neighborhood_side, n_voxels=120)
    rng = np.random.default_rng(seed)
    for _, p in model.params:  # non-zero biases exercise every path
        p.data += 0.05 * rng.normal(size=p.data.shape)
    leaves = [p for _, p in model.params]
    return Case(f"model_m{cfg.decoder_layers}e{cfg.decoder_reach}c{cfg.head_depth}", leaves,
                lambda: batch_loss(model, [plan])[0], sample=sample)


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    cases = op_cases(seed)
    if include_model:
        cases.append(model_case(seed))
    return [run_case(c, seed=seed) for c in cases]
