"""Command-line entry point: ``python -m nomae <command> [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import RunConfig
from .data import load_points, save_points, synth_scene
from .errors import NomaeError, NumericalError
from .geometry import PointCloud, voxelize_pyramid
from .masking import (RatioFormula, MaskingConfig, Strategy, binomial_sigma, expected_total_ratio,
                      generate)
from .model import PretextModel
from .neighborhood import SWEEP_SIDES, NeighborhoodSpec, build_targets, recovered_lost_accounting
from .sparsenn import checkpoint
from .sparsenn.optim import AdamState
from .training import EvalReport, PreparedScene, Trainer, derive_seed, evaluate, prepare_scene

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
ENV_OUT = "NOMAE_OUT"
MANIFEST = "manifest.json"
EVAL_SALT = 0xE7A1


class RunDir:
    """Output directory that records every artifact it writes."""

    def __init__(self, path: Path):
        self.path = path
        path.mkdir(parents=True, exist_ok=True)
        self.names: list[str] = []

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode())

    def write_bytes(self, name: str, blob: bytes) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(blob)
        if name not in self.names:
            self.names.append(name)
        return p

    def finish(self) -> None:
        entries = []
        for name in sorted(self.names):
            blob = (self.path / name).read_bytes()
            entries.append({"name": name, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
        (self.path / MANIFEST).write_text(json.dumps({"artifacts": entries}, indent=2) + "\n")


# ---------------------------------------------------------------------------
# shared plumbing


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace("optim", steps=args.steps)
    if args.overfit_one:
        cfg = cfg.replace("run", overfit_one=True)
    if args.strategy is not None and args.strategy != "all":
        cfg = cfg.replace("masking", strategy=args.strategy)
    out = args.out or os.environ.get(ENV_OUT) or cfg.run.out
    return cfg.replace("run", out=str(out))


def load_scenes(cfg: RunConfig) -> tuple[list[PointCloud], list[PointCloud]]:
    """(training scenes, held-out scenes)."""
    d = cfg.data
    if d.synth:
        scenes = [synth_scene(cfg.scene_config(i)) for i in range(d.num_scenes)]
    else:
        scenes = [load_points(p, d.format) for p in d.paths]
    k = d.holdout
    train, held = (scenes[:-k], scenes[-k:]) if k else (scenes, [])
    if not train:
        raise NomaeError("no training scenes")
    if cfg.run.overfit_one:
        train = train[:1]
    return train, held


def eval_scenes(cfg: RunConfig, scenes: list[PointCloud], salt: int) -> list[PreparedScene]:
    """Deterministic masks, no augmentation."""
    pipe = cfg.pipeline()
    return [prepare_scene(c, pipe, derive_seed(cfg.run.seed, EVAL_SALT, salt, i)) for i, c in enumerate(scenes)]


def checkpoint_arrays(model: PretextModel, state: AdamState) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v for k, v in model.params.state_arrays().items()}
    arrays["adam/step"] = np.array([state.step], dtype=np.int64)
    for k in model.params.names():
        if k in state.m:
            arrays[f"adam/m/{k}"] = state.m[k]
            arrays[f"adam/v/{k}"] = state.v[k]
    return arrays


def load_model(cfg: RunConfig, path: str | Path) -> PretextModel:
    model = PretextModel(cfg.model_config(), seed=derive_seed(cfg.run.seed, 17))
    arrays = checkpoint.load(path)
    model.params.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model


def _echo(run: RunDir, cfg: RunConfig) -> None:
    run.write_text("config.toml", cfg.dumps())


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: RunConfig, args) -> int:
    run = RunDir(Path(cfg.run.out))
    _echo(run, cfg)
    train, held = load_scenes(cfg)
    model = PretextModel(cfg.model_config(), seed=derive_seed(cfg.run.seed, 17))
    trainer = Trainer(model, train, cfg.pipeline(), cfg.train_config())
    held_prep = eval_scenes(cfg, held, 1) if held else []
    if held_prep:
        if model.cfg.prior_bias_init:
            trainer.init_head_bias()
        run.write_text("eval_holdout_step0.csv", evaluate(model, held_prep).to_csv())
    header = "step\tlr\tloss\t" + "\t".join(f"loss_s{s}" for s in range(cfg.geometry.num_scales))
    lines = [header]
    every = cfg.run.checkpoint_every
    for log in trainer.run():
        lines.append(log.line())
        if not np.isfinite(log.loss):
            raise NumericalError(f"non-finite loss at step {log.step}")
        if (log.step + 1) % every == 0:
            run.write_bytes(f"checkpoints/step_{log.step + 1:06d}.ckpt",
                            checkpoint.encode(checkpoint_arrays(model, trainer.state)))
        if not args.quiet:
            print(log.line(), flush=True)
    run.write_text("metrics.tsv", "\n".join(lines) + "\n")
    run.write_bytes("model.ckpt", checkpoint.encode(checkpoint_arrays(model, trainer.state)))
    if cfg.run.overfit_one:
        train_prep = [trainer.prepare(0, 0)]
    else:
        train_prep = eval_scenes(cfg, train, 0)
    report = evaluate(model, train_prep)
    run.write_text("eval.csv", report.to_csv())
    if held_prep:
        run.write_text("eval_holdout.csv", evaluate(model, held_prep).to_csv())
    run.finish()
    print(f"final loss {report.loss:.6f}; iou " + " ".join(f"{m.iou:.4f}" for m in report.scales))
    return EXIT_OK


def mask_stats_table(cfg: RunConfig, strategies: list[Strategy], seeds: int,
                     sides=SWEEP_SIDES) -> tuple[list[dict], list[str]]:
    """Rows (strategy, scale, ratio_mean, ratio_std, recovered_frac, n) plus monotonicity notes."""
    train, held = load_scenes(cfg)
    scenes = train + held
    pipe = cfg.pipeline()
    S = pipe.num_scales
    pyramids = [voxelize_pyramid(c, pipe.base_size, S, pipe.origin) for c in scenes]
    rows, notes = [], []
    for strat in strategies:
        ratios = []  # (pair, scale)
        rec = {n: [] for n in sides}
        for p_idx, pyr in enumerate(pyramids):
            for seed in range(seeds):
                mcfg = MaskingConfig.from_total(pipe.mask_ratio, S, strat, derive_seed(cfg.run.seed, p_idx, seed))
                asg = generate(pyr, mcfg)
                ratios.append([f.mean() for f in asg.masked_flags])
                prev = None
                for n in sides:
                    tgt = build_targets(asg, pyr, NeighborhoodSpec.uniform(n, S))
                    fr = [a.recovered_fraction for a in recovered_lost_accounting(asg, tgt)]
                    rec[n].append(fr)
                    if prev is not None and any(b < a for a, b in zip(prev, fr)):
                        notes.append(f"{strat.value} scene {p_idx} seed {seed}: recovered fraction "
                                     f"decreased at n={n}")
                    prev = fr
        ratios = np.asarray(ratios)
        for n in sides:
            r = np.asarray(rec[n])
            for s in range(S):
                rows.append(dict(strategy=strat.value, scale=s, ratio_mean=float(ratios[:, s].mean()),
                                 ratio_std=float(ratios[:, s].std(ddof=1)) if len(ratios) > 1 else 0.0,
                                 recovered_frac=float(r[:, s].mean()), n=n))
    return rows, notes


def cmd_mask_stats(cfg: RunConfig, args) -> int:
    run = RunDir(Path(cfg.run.out))
    _echo(run, cfg)
    strategies = list(Strategy) if args.strategy in (None, "all") else [Strategy(args.strategy)]
    rows, notes = mask_stats_table(cfg, strategies, args.seeds)
    csv = ["strategy,scale,ratio_mean,ratio_std,recovered_frac,n"]
    csv += [f"{r['strategy']},{r['scale']},{r['ratio_mean']:.6f},{r['ratio_std']:.6f},"
            f"{r['recovered_frac']:.6f},{r['n']}" for r in rows]
    run.write_text("mask_stats.csv", "\n".join(csv) + "\n")
    S = cfg.geometry.num_scales
    r = MaskingConfig.from_total(cfg.masking.total_ratio, S).ratio
    text = [f"per-scale ratio r = {r:.6f} (total {cfg.masking.total_ratio})"]
    first_n = rows[0]["n"] if rows else None
    for row in rows:
        if row["n"] != first_n:
            continue
        s = row["scale"]
        sim = expected_total_ratio(r, S, s, RatioFormula.SIMULATED)
        extra = expected_total_ratio(r, S, s, RatioFormula.EXTRA_ROUND)
        text.append(f"{row['strategy']:9s} scale {s}: ratio {row['ratio_mean']:.4f} +- {row['ratio_std']:.4f}"
                    f"  hmg formula {sim:.4f}  one-extra-round formula {extra:.4f}")
    text.append("recovered fraction monotone in n: " + ("yes" if not notes else "NO"))
    text += notes
    run.write_text("mask_stats.txt", "\n".join(text) + "\n")
    run.finish()
    print("\n".join(text))
    return EXIT_OK


def cmd_targets_dump(cfg: RunConfig, args) -> int:
    run = RunDir(Path(cfg.run.out))
    _echo(run, cfg)
    train, _ = load_scenes(cfg)
    prep = prepare_scene(train[0], cfg.pipeline(), derive_seed(cfg.run.seed, 0))
    t = prep.targets
    for s in range(t.num_scales):
        lines = ["i,j,k,label"]
        lines += [f"{i},{j},{k},{y}" for (i, j, k), y in zip(t.coords[s].coords.tolist(), t.labels[s].tolist())]
        run.write_text(f"targets_s{s}.csv", "\n".join(lines) + "\n")
    acc = recovered_lost_accounting(prep.assignment, t)
    summary = ["scale,targets,positives,masked,recovered,lost"]
    summary += [f"{a.scale},{len(t.coords[a.scale])},{int(t.labels[a.scale].sum())},{a.masked},"
                f"{a.recovered},{a.lost}" for a in acc]
    run.write_text("targets_summary.csv", "\n".join(summary) + "\n")
    run.finish()
    print("\n".join(summary))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    run = RunDir(Path(cfg.run.out))
    _echo(run, cfg)
    results = gradcheck.run_suite(seed=cfg.run.seed % 2**32)
    lines = ["op,checked,max_rel_error,ok"]
    lines += [f"{r.name},{r.checked},{r.max_rel_error:.3e},{int(r.ok)}" for r in results]
    run.write_text("gradcheck.csv", "\n".join(lines) + "\n")
    run.finish()
    print("\n".join(lines))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_synth(cfg: RunConfig, args) -> int:
    run = RunDir(Path(cfg.run.out))
    _echo(run, cfg)
    for i in range(cfg.data.num_scenes):
        cloud = synth_scene(cfg.scene_config(i))
        save_points(run.path / f"scene_{i:04d}.bin", cloud)
        run.names.append(f"scene_{i:04d}.bin")
        print(f"scene_{i:04d}.bin {len(cloud)} points")
    run.finish()
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise NomaeError("eval needs --checkpoint")
    run = RunDir(Path(cfg.run.out))
    _echo(run, cfg)
    model = load_model(cfg, args.checkpoint)
    train, held = load_scenes(cfg)
    scenes = eval_scenes(cfg, held, 1) if held else eval_scenes(cfg, train, 0)
    report: EvalReport = evaluate(model, scenes)
    run.write_text("eval.csv", report.to_csv())
    run.finish()
    print(report.to_csv(), end="")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "mask-stats": cmd_mask_stats,
    "targets-dump": cmd_targets_dump,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit run seed")
    common.add_argument("--steps", type=int, help="optimizer steps (overrides epochs)")
    common.add_argument("--overfit-one", action="store_true", help="single scene, fixed mask, batch 1")
    common.add_argument("--strategy", choices=[s.value for s in Strategy] + ["all"])
    common.add_argument("--out", help=f"run directory (else ${ENV_OUT}, else run.out)")
    common.add_argument("--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="nomae", description="Multi-scale masked occupancy pretraining.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "mask-stats":
            sp.add_argument("--seeds", type=int, default=20, help="mask seeds per scene")
        if name == "eval":
            sp.add_argument("--checkpoint", help="checkpoint written by pretrain")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg, args)
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except NomaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
