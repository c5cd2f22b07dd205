"""Acceptance criteria 1-12, each printed as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected into the terminal summary of any pytest session.
"""

import csv
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from nomae.cli import main
from nomae.config import RunConfig
from nomae.coords import CoordSet
from nomae.data import SceneConfig, synth_scene
from nomae.geometry import PointCloud, voxelize, voxelize_pyramid
from nomae.gradcheck import small_plan
from nomae.masking import (RatioFormula, MaskingConfig, Strategy, binomial_sigma, consistency_violations,
                           expected_total_ratio, generate, hmg_generate)
from nomae.model import ModelConfig, PretextModel
from nomae.neighborhood import SWEEP_SIDES, NeighborhoodSpec, build_targets, dilate, lost_voxels, recovered_lost_accounting
from nomae.reference import brute_dilate, dense_forward, monte_carlo_mask_ratio
from nomae.sparsenn.autograd import constant
from nomae.sparsenn.ops import SparseFeatureMap
from nomae.training import PipelineConfig, prepare_scene

S = 4
DESK_WIDTHS = dict(channels=(16, 16, 32, 32), decoder_channels=(16, 16, 16, 16))


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def dispersed_pyramid(n_voxels: int, seed: int = 0):
    """Finest voxels spaced 8 apart, so no two share an ancestor at any scale."""
    side = math.ceil(n_voxels ** (1 / 3)) + 1
    rng = np.random.default_rng(seed)
    keys = rng.choice(side**3, n_voxels, replace=False)
    ijk = np.stack(np.unravel_index(keys, (side,) * 3), axis=1) * 8
    return voxelize_pyramid(PointCloud((ijk + 0.5) * 0.05), 0.05, S)


def clustered_pyramid(min_voxels: int):
    """Full-size synthetic scans placed side by side until the finest level is big enough."""
    parts, total, i = [], 0, 0
    while total < min_voxels:
        c = synth_scene(SceneConfig(seed=i)).xyz.astype(np.float64)
        c[:, 0] += 200.0 * i
        parts.append(c)
        total = len(voxelize_pyramid(PointCloud(np.concatenate(parts)), 0.05, 1)[0])
        i += 1
    return voxelize_pyramid(PointCloud(np.concatenate(parts)), 0.05, S)


def mean_holdout_loss(path) -> float:
    rows = list(csv.DictReader(open(path)))
    return float(np.mean([float(r["loss"]) for r in rows]))


# ---------------------------------------------------------------------------


def test_criterion_01_mask_consistency(desk_clouds):
    t0 = time.perf_counter()
    pyramids = [voxelize_pyramid(synth_scene(SceneConfig.desk(s))) for s in range(10)]
    pairs, violations = 0, 0
    for p_idx, pyr in enumerate(pyramids):
        for seed in range(10):
            pairs += 1
            for strat in Strategy:
                a = generate(pyr, MaskingConfig.from_total(0.7, S, strat, seed=1000 * p_idx + seed))
                violations += consistency_violations(a, pyr)
    dt = time.perf_counter() - t0
    record(1, violations == 0 and pairs >= 100 and dt < 60,
           f"{pairs} (scene, seed) pairs x 3 strategies, {violations} violations, {dt:.1f}s")


def test_criterion_02_ratio_law():
    t0 = time.perf_counter()
    r = MaskingConfig.from_total(0.7, S).ratio
    details, ok = [], True
    # dispersed scene: every voxel is an independent Bernoulli draw, so binomial sigma is exact
    pyr = dispersed_pyramid(110_000)
    a = hmg_generate(pyr, MaskingConfig(r, seed=2024))
    for s in range(S):
        p = expected_total_ratio(r, S, s, RatioFormula.SIMULATED)
        extra = expected_total_ratio(r, S, s, RatioFormula.EXTRA_ROUND)
        frac = float(a.masked_flags[s].mean())
        z = (frac - p) / binomial_sigma(p, len(pyr[s]))
        ok &= abs(z) <= 3
        details.append(f"s{s} N={len(pyr[s])} got {frac:.4f} law {p:.4f} (z={z:+.2f}) printed-form {extra:.4f}")
    # clustered scene: draws share ancestors, so compare a Monte-Carlo mean against its own error
    cpyr = clustered_pyramid(100_000)
    mean, std = monte_carlo_mask_ratio(cpyr, r, 30, seed=7)
    for s in range(S):
        p = expected_total_ratio(r, S, s, RatioFormula.SIMULATED)
        sem = std[s] / math.sqrt(30)
        ok &= abs(mean[s] - p) <= 3 * sem
        details.append(f"clustered s{s} N={len(cpyr[s])} mean {mean[s]:.4f} law {p:.4f} "
                       f"(z={(mean[s] - p) / sem:+.2f} vs MC sem)")
    dt = time.perf_counter() - t0
    ok &= dt < 60
    print("\n".join(details))
    record(2, ok, f"HMG per-scale ratio within 3 sigma of 1-(1-r)^(S-s) on >=1e5-voxel scenes, {dt:.1f}s")


def test_criterion_03_ratio_targeting(desk_pyramids):
    cfg = MaskingConfig.from_total(0.70, S)
    pyr = dispersed_pyramid(110_000, seed=1)
    single = float(hmg_generate(pyr, MaskingConfig(cfg.ratio, seed=3)).masked_flags[0].mean())
    masked = total = 0
    for p_idx, p in enumerate(desk_pyramids):
        for seed in range(20):
            f = hmg_generate(p, MaskingConfig(cfg.ratio, seed=100 * p_idx + seed)).masked_flags[0]
            masked += int(f.sum())
            total += f.size
    pooled = masked / total
    ok = abs(single - 0.70) <= 0.01 and abs(pooled - 0.70) <= 0.01
    record(3, ok, f"per-scale r={cfg.ratio:.4f}; finest ratio {single:.4f} (1.1e5-voxel scene), "
                  f"{pooled:.4f} pooled over 120 desk draws; target 0.70 +- 0.01")


def test_criterion_04_neighborhood():
    rng = np.random.default_rng(44)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 501))
        radius = int(rng.integers(1, 5))
        extent = int(rng.integers(4, 20))
        vis = CoordSet(rng.integers(-extent, extent, size=(n, 3)))
        got = {tuple(c) for c in dilate(vis, radius).coords.tolist()}
        mismatches += got != brute_dilate(vis.coords, radius)
    one = CoordSet(np.zeros((1, 3), dtype=np.int64))
    n26, n728 = len(dilate(one, 1)), len(dilate(one, NeighborhoodSpec.uniform(9).radius(0)))
    record(4, mismatches == 0 and n26 == 26 and n728 == 728,
           f"100 random instances, {mismatches} mismatches vs brute force; single voxel R=1 -> {n26}, n=9 -> {n728}")


def _tiny(m, e):
    return ModelConfig(num_scales=2, channels=(3, 3), decoder_channels=(3, 3), decoder_layers=m,
                       decoder_reach=e, head_depth=1, encoder_blocks=1, dtype="float64")


def _seed_map(coords, feats):
    return SparseFeatureMap(coords, constant(feats))


def test_criterion_05_decoder_geometry():
    results, ok = [], True
    rng = np.random.default_rng(5)
    for m, e in ((1, 1), (2, 1), (2, 2)):
        cfg = _tiny(m, e)
        n = cfg.neighborhood_side
        model = PretextModel(cfg, seed=m * 10 + e)
        for _, p in model.params:
            p.data += 0.1 * rng.normal(size=p.data.shape)
        # one seed voxel: the active set is exactly the n^3 cube around it
        seed = CoordSet(np.zeros((1, 3), dtype=np.int64))
        feats = rng.normal(size=(1, 3))
        z0 = model.decode_active(_seed_map(seed, feats), 0, seed)
        lo, hi = z0.coords.coords.min(axis=0), z0.coords.coords.max(axis=0)
        cube = len(z0.coords) == n**3 and (hi - lo + 1 == n).all()
        # perturbing the seed moves every logit of the cube
        z1 = model.decode_active(_seed_map(seed, feats + 1.0), 0, seed)
        reach_all = bool((np.abs(z1.features.data - z0.features.data) > 0).all())
        # two seeds further apart than the full reach do not influence each other
        far = 2 * (m * e + 1) + 1
        two = CoordSet(np.array([[0, 0, 0], [far, 0, 0]]))
        f2 = rng.normal(size=(2, 3))
        a = model.decode_active(_seed_map(two, f2), 0, two)
        f2b = f2.copy()
        f2b[0] += 1.0
        b = model.decode_active(_seed_map(two, f2b), 0, two)
        dist = np.abs(a.coords.coords - [0, 0, 0]).max(axis=1)
        changed = np.abs(a.features.data - b.features.data).max(axis=1) > 0
        local = bool(not changed[dist > m * e + 1].any() and changed[dist <= m * e].all())
        ok &= cube and reach_all and local
        results.append(f"m{m}e{e}: side {int((hi - lo + 1)[0])} (n={n})")
    record(5, ok, "; ".join(results) + "; perturbation reach confined to m*e (+1 for the head)")


def _deletable(prep) -> np.ndarray:
    """Lost finest rows whose removal leaves every visible voxel in place.

    A lost finest voxel can be the only child of a coarse voxel that is
    visible; deleting it would remove visible input, so it is kept.
    """
    pyr, asg, tgt = prep.pyramid, prep.assignment, prep.targets
    fine = pyr[0].coords
    drop = fine.isin(lost_voxels(asg, tgt, 0))
    for s in range(1, pyr.num_scales):
        rows = pyr[s].coords.index(np.floor_divide(fine.coords, 1 << s))
        survivors = np.bincount(rows[~drop], minlength=len(pyr[s]))
        bad = (survivors == 0) & ~asg.masked_flags[s]
        drop &= ~bad[rows]
    return drop


def test_criterion_06_no_leakage():
    pipe = PipelineConfig()
    model = PretextModel(ModelConfig(**DESK_WIDTHS), seed=6)
    identical, removed_voxels, removed_points, scenes, lost_total = 0, 0, 0, 0, 0
    for k in range(20):
        cloud = synth_scene(SceneConfig.desk(100 + k))
        prep = prepare_scene(cloud, pipe, mask_seed=k)
        drop = _deletable(prep)
        lost_total += len(lost_voxels(prep.assignment, prep.targets, 0))
        _, point_voxel = voxelize(cloud, pipe.base_size, pipe.origin)
        keep = ~drop[point_voxel]
        pruned = prepare_scene(cloud.take(np.flatnonzero(keep)), pipe, mask_seed=k)
        a = model.forward(prep.plan)
        b = model.forward(pruned.plan)
        same = all(x.coords == y.coords and x.features.data.tobytes() == y.features.data.tobytes()
                   for x, y in zip(a.logits, b.logits))
        identical += same
        removed_voxels += int(drop.sum())
        removed_points += int((~keep).sum())
        scenes += 1
    record(6, identical == scenes and scenes >= 20 and removed_voxels > 0,
           f"{identical}/{scenes} scenes bit-identical after deleting {removed_voxels} of {lost_total} lost "
           f"finest voxels ({removed_points} points; the rest are sole children of visible coarse voxels)")


def test_criterion_07_gradcheck(tmp_path):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--out", str(tmp_path / "gc"), "--quiet"])
    dt = time.perf_counter() - t0
    rows = list(csv.DictReader(open(tmp_path / "gc" / "gradcheck.csv")))
    worst = max(float(r["max_rel_error"]) for r in rows)
    names = {r["op"] for r in rows}
    needed = {"linear", "add", "concat", "relu", "gelu", "pool_down", "unpool_up", "embed", "select",
              "bce_with_logits", "submanifold_conv_r1", "expansion_conv_r2"}
    ok = code == 0 and needed <= names and any(n.startswith("model_") for n in names) and worst < 1e-4 and dt < 120
    record(7, ok, f"{len(rows)} cases incl. full model, max relative error {worst:.2e} (< 1e-4), {dt:.1f}s")


def test_criterion_08_dense_equivalence():
    # float32 at the training init (logits O(1)) and float64 with every bias and
    # fill vector perturbed away from zero so that all paths carry signal
    worst = {"float32": 0.0, "float64": 0.0}
    ok = True
    for dtype, pert in (("float32", 0.0), ("float64", 0.05)):
        for i, strat in enumerate(Strategy):
            plan = small_plan(seed=80 + i, n_voxels=400, extent=32, total_ratio=0.5, strategy=strat)
            ok &= bool((np.ptp(plan.visible_input.coords.coords, axis=0) < 32).all())
            model = PretextModel(ModelConfig(**DESK_WIDTHS, dtype=dtype), seed=i)
            rng = np.random.default_rng(i)
            for _, p in model.params:
                p.data += (pert * rng.normal(size=p.data.shape)).astype(p.data.dtype)
            sparse = model.forward(plan).logit_arrays()
            params = {k: v.astype(np.float64) for k, v in model.params.state_arrays().items()}
            dense = dense_forward(plan, params, model.cfg)
            err = max(float(np.abs(a - b).max()) for a, b in zip(sparse, dense))
            worst[dtype] = max(worst[dtype], err)
    ok &= max(worst.values()) < 1e-5
    record(8, ok, f"3 masked scenes within a 32^3 box per dtype, max |sparse - dense| = "
                  f"{worst['float32']:.2e} (float32), {worst['float64']:.2e} (float64); bound 1e-5")


OVERFIT_TOML = """
[model]
channels = [16, 16, 32, 32]
decoder_channels = [8, 8, 8, 8]
[optim]
steps = 500
[data]
num_scenes = 1
scene_seed = 3
[run]
overfit_one = true
checkpoint_every = 1000
"""

HELDOUT_TOML = """
[model]
channels = [16, 16, 32, 32]
decoder_channels = [8, 8, 8, 8]
[optim]
batch_size = 1
warmup_epochs = 0
steps = 120
[data]
num_scenes = 7
scene_seed = 10
holdout = 2
[run]
checkpoint_every = 1000
"""


def test_criterion_09_desk_learning(tmp_path):
    t0 = time.perf_counter()
    over_cfg = tmp_path / "over.toml"
    over_cfg.write_text(OVERFIT_TOML)
    cfg = RunConfig.load(over_cfg)
    assert (cfg.model.decoder_layers, cfg.model.decoder_reach, cfg.model.head_depth, cfg.neighborhood.side) == (2, 2, 1, 9)
    code1 = main(["pretrain", "--config", str(over_cfg), "--out", str(tmp_path / "over"), "--quiet"])
    rows = list(csv.DictReader(open(tmp_path / "over" / "eval.csv")))
    loss = float(np.mean([float(r["loss"]) for r in rows]))
    ious = [float(r["iou"]) for r in rows]
    t1 = time.perf_counter()
    held_cfg = tmp_path / "held.toml"
    held_cfg.write_text(HELDOUT_TOML)
    code2 = main(["pretrain", "--config", str(held_cfg), "--out", str(tmp_path / "held"), "--quiet"])
    l0 = mean_holdout_loss(tmp_path / "held" / "eval_holdout_step0.csv")
    l1 = mean_holdout_loss(tmp_path / "held" / "eval_holdout.csv")
    dt = time.perf_counter() - t0
    drop = 1 - l1 / l0
    ok = code1 == 0 and code2 == 0 and loss < 0.05 and min(ious) > 0.95 and drop >= 0.30 and dt < 900
    record(9, ok, f"overfit-one 500 steps: L={loss:.4f}, IoU per scale {' '.join(f'{v:.3f}' for v in ious)} "
                  f"({t1 - t0:.0f}s); held-out L {l0:.4f} -> {l1:.4f} ({100 * drop:.0f}% lower); total {dt:.0f}s")


def test_criterion_10_monotonicity(desk_pyramids):
    checked, bad = 0, 0
    for p_idx, pyr in enumerate(desk_pyramids):
        for strat in Strategy:
            for seed in range(4):
                a = generate(pyr, MaskingConfig.from_total(0.7, S, strat, seed=10 * p_idx + seed))
                prev = None
                for n in SWEEP_SIDES:
                    fr = [x.recovered_fraction for x in
                          recovered_lost_accounting(a, build_targets(a, pyr, NeighborhoodSpec.uniform(n)))]
                    if prev is not None:
                        bad += sum(b < p for p, b in zip(prev, fr))
                    prev = fr
                checked += 1
    record(10, bad == 0, f"{checked} (scene, seed, strategy) triples over n in {SWEEP_SIDES}, "
                         f"{bad} decreases at any scale")


DET_TOML = """
[model]
channels = [8, 8, 8, 8]
decoder_channels = [8, 8, 8, 8]
[optim]
batch_size = 2
steps = 4
[data]
num_scenes = 3
[run]
seed = 12345678901234567890
checkpoint_every = 2
"""


def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "det.toml"
    cfg.write_text(DET_TOML)
    for name in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / name), "--quiet"]) == 0
    files = ["metrics.tsv", "model.ckpt", "checkpoints/step_000002.ckpt", "checkpoints/step_000004.ckpt", "eval.csv"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    record(11, all(same), f"two pretrain runs (augmentation and fresh masks on): {sum(same)}/{len(files)} "
                          f"artifacts byte-identical ({', '.join(files)})")


def test_criterion_12_strategy_contrast(desk_pyramids):
    wins, n = 0, 0
    for seed in range(30):
        pyr = desk_pyramids[seed % len(desk_pyramids)]
        hmg = generate(pyr, MaskingConfig.from_total(0.7, S, Strategy.HMG, seed=seed))
        naive = generate(pyr, MaskingConfig.from_total(0.7, S, Strategy.NAIVE, seed=seed))
        assert abs(hmg.masked_flags[0].mean() - naive.masked_flags[0].mean()) < 0.1
        wins += naive.masked_flags[-1].mean() < hmg.masked_flags[-1].mean()
        n += 1
    p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n
    record(12, n >= 20 and p < 0.01, f"naive coarsest ratio below HMG in {wins}/{n} seeds, one-sided sign test p={p:.2e}")
