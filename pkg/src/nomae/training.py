"""Scene preprocessing, the optimisation loop and pretext-domain evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import AugmentConfig, augment
from .errors import EmptyInput, InvalidConfig
from .geometry import BASE_VOXEL_SIZE, NUM_SCALES, PointCloud, VoxelPyramid, clip_range, voxelize_pyramid
from .masking import NUSCENES_TOTAL_RATIO, MaskAssignment, MaskingConfig, Strategy, encoder_input, generate
from .model import ModelConfig, PretextModel, ScenePlan, batch_loss
from .neighborhood import Accounting, NeighborhoodSpec, TargetSet, build_targets, recovered_lost_accounting
from .sparsenn.autograd import backward
from .sparsenn.optim import AdamHyper, AdamState, adam_step, cosine_lr

BATCH_SIZE = 8
EPOCHS = 50
WARMUP_EPOCHS = 2


@dataclass(frozen=True)
class PipelineConfig:
    base_size: float = BASE_VOXEL_SIZE
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    num_scales: int = NUM_SCALES
    mask_ratio: float = NUSCENES_TOTAL_RATIO  # total ratio at the finest scale
    strategy: Strategy = Strategy.HMG
    neighborhood_side: int = 9
    clip_min: tuple[float, float, float] | None = None
    clip_max: tuple[float, float, float] | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.base_size <= 0:
            raise InvalidConfig("base_size must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise InvalidConfig("mask_ratio must lie in [0, 1)")
        if (self.clip_min is None) != (self.clip_max is None):
            raise InvalidConfig("clip_min and clip_max must be given together")

    def masking(self, seed: int) -> MaskingConfig:
        return MaskingConfig.from_total(self.mask_ratio, self.num_scales, self.strategy, seed)

    def neighborhood(self) -> NeighborhoodSpec:
        return NeighborhoodSpec.uniform(self.neighborhood_side, self.num_scales)


@dataclass(frozen=True)
class TrainConfig:
    steps: int | None = None  # overrides epochs when set
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    lr: float = 2e-3
    weight_decay: float = 5e-2
    warmup_epochs: float = WARMUP_EPOCHS
    seed: int = 0
    fixed_mask: bool = False  # reuse one mask per scene (overfitting runs)
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise InvalidConfig("steps must be >= 0")

    def hyper(self) -> AdamHyper:
        return AdamHyper(lr=self.lr, weight_decay=self.weight_decay)

    def schedule(self, num_scenes: int) -> tuple[int, int]:
        """(total steps, warmup steps) for a dataset of ``num_scenes``."""
        per_epoch = max(1, math.ceil(num_scenes / self.batch_size))
        total = self.steps if self.steps is not None else self.epochs * per_epoch
        warm = min(int(round(self.warmup_epochs * per_epoch)), max(total - 1, 0))
        return total, warm


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(eq=False)
class PreparedScene:
    pyramid: VoxelPyramid
    assignment: MaskAssignment
    targets: TargetSet
    plan: ScenePlan


def prepare_scene(cloud: PointCloud, pipe: PipelineConfig, mask_seed: int,
                  aug_seed: int | None = None) -> PreparedScene:
    """augment -> clip -> voxelize -> pyramid -> mask -> targets -> plan."""
    if aug_seed is not None:
        cloud = augment(cloud, pipe.augment, aug_seed)
    if pipe.clip_min is not None:
        cloud = clip_range(cloud, pipe.clip_min, pipe.clip_max)
    if len(cloud) == 0:
        raise EmptyInput("scene is empty after clipping")
    pyr = voxelize_pyramid(cloud, pipe.base_size, pipe.num_scales, pipe.origin)
    asg = generate(pyr, pipe.masking(mask_seed))
    tgt = build_targets(asg, pyr, pipe.neighborhood())
    return PreparedScene(pyr, asg, tgt, ScenePlan.build(encoder_input(asg, pyr), asg, tgt))


@dataclass(frozen=True)
class StepLog:
    step: int
    lr: float
    loss: float
    per_scale: tuple[float, ...]

    def line(self) -> str:
        parts = [str(self.step), f"{self.lr:.6e}", f"{self.loss:.8f}"]
        parts += [f"{v:.8f}" for v in self.per_scale]
        return "\t".join(parts)


def train_step(model: PretextModel, plans: Sequence[ScenePlan], state: AdamState,
               hyper: AdamHyper, lr: float) -> tuple[float, list[float]]:
    """forward -> loss -> backward -> AdamW on one batch of prepared scenes."""
    model.params.zero_grad()
    loss, per_scale = batch_loss(model, list(plans))
    backward(loss)
    adam_step(model.params, state, hyper, lr)
    return float(loss.data), per_scale


class Trainer:
    """Drives pretraining over a fixed list of scenes."""

    def __init__(self, model: PretextModel, scenes: Sequence[PointCloud], pipe: PipelineConfig,
                 cfg: TrainConfig):
        if not scenes:
            raise EmptyInput("no training scenes")
        model.cfg.check_neighborhood(pipe.neighborhood())
        if model.cfg.num_scales != pipe.num_scales:
            raise InvalidConfig("model and pipeline disagree on the scale count")
        self.model = model
        self.scenes = list(scenes)
        self.pipe = pipe
        self.cfg = cfg
        self.state = AdamState()
        self.total_steps, self.warmup_steps = cfg.schedule(len(self.scenes))
        self._fixed: dict[int, PreparedScene] = {}

    def prepare(self, scene_idx: int, step: int) -> PreparedScene:
        if self.cfg.fixed_mask:
            hit = self._fixed.get(scene_idx)
            if hit is None:
                seed = derive_seed(self.cfg.seed, scene_idx)
                hit = self._fixed[scene_idx] = prepare_scene(self.scenes[scene_idx], self.pipe, seed)
            return hit
        mask_seed = derive_seed(self.cfg.seed, step, scene_idx, 1)
        aug_seed = derive_seed(self.cfg.seed, step, scene_idx, 2) if self.cfg.augment else None
        return prepare_scene(self.scenes[scene_idx], self.pipe, mask_seed, aug_seed)

    def batch_indices(self, step: int) -> list[int]:
        n = len(self.scenes)
        per_epoch = max(1, math.ceil(n / self.cfg.batch_size))
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng(derive_seed(self.cfg.seed, epoch, 3)).permutation(n)
        return order[k * self.cfg.batch_size:(k + 1) * self.cfg.batch_size].tolist()

    def init_head_bias(self) -> None:
        prepared = [self.prepare(i, 0) for i in self.batch_indices(0)]
        self.model.init_head_bias([p.targets for p in prepared])

    def run(self, steps: int | None = None) -> Iterator[StepLog]:
        total = self.total_steps if steps is None else steps
        hyper = self.cfg.hyper()
        if self.state.step == 0 and self.model.cfg.prior_bias_init:
            self.init_head_bias()
        for step in range(self.state.step, total):
            plans = [self.prepare(i, step).plan for i in self.batch_indices(step)]
            lr = cosine_lr(step, self.total_steps, self.cfg.lr, self.warmup_steps)
            loss, per_scale = train_step(self.model, plans, self.state, hyper, lr)
            yield StepLog(step, lr, loss, tuple(per_scale))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ScaleMetrics:
    scale: int
    targets: int
    positives: int
    predicted: int
    true_positives: int
    loss: float
    masked: int
    recovered: int
    lost: int

    @property
    def precision(self) -> float:
        return self.true_positives / self.predicted if self.predicted else 1.0

    @property
    def recall(self) -> float:
        return self.true_positives / self.positives if self.positives else 1.0

    @property
    def iou(self) -> float:
        union = self.predicted + self.positives - self.true_positives
        return self.true_positives / union if union else 1.0

    @property
    def recovered_fraction(self) -> float:
        return self.recovered / self.masked if self.masked else 1.0


@dataclass(frozen=True)
class EvalReport:
    scales: tuple[ScaleMetrics, ...]
    loss: float

    def to_csv(self) -> str:
        lines = ["scale,targets,positives,precision,recall,iou,loss,masked,recovered,lost,recovered_frac"]
        for m in self.scales:
            lines.append(f"{m.scale},{m.targets},{m.positives},{m.precision:.6f},{m.recall:.6f},"
                         f"{m.iou:.6f},{m.loss:.8f},{m.masked},{m.recovered},{m.lost},"
                         f"{m.recovered_fraction:.6f}")
        return "\n".join(lines) + "\n"


def _bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def score(logits: Sequence[Sequence[np.ndarray]], scenes: Sequence[PreparedScene]) -> EvalReport:
    """Metrics at threshold 0.5 (logit 0) over the target domains only."""
    S = scenes[0].targets.num_scales
    counts = np.zeros((S, 7), dtype=np.int64)
    losses = np.zeros(S)
    scene_losses = []
    for z_scene, prep in zip(logits, scenes):
        acc = recovered_lost_accounting(prep.assignment, prep.targets)
        per = []
        for s in range(S):
            z = np.asarray(z_scene[s], dtype=np.float64)
            y = prep.targets.labels[s].astype(bool)
            pred = z > 0
            counts[s] += [y.size, y.sum(), pred.sum(), (pred & y).sum(),
                          acc[s].masked, acc[s].recovered, acc[s].lost]
            per.append(float(_bce(z, y).mean()) if y.size else 0.0)
        losses += per
        scene_losses.append(float(np.mean(per)))
    losses /= len(scenes)
    rows = tuple(ScaleMetrics(s, *[int(v) for v in counts[s, :4]], float(losses[s]),
                              *[int(v) for v in counts[s, 4:]]) for s in range(S))
    return EvalReport(rows, float(np.mean(scene_losses)))


def evaluate(model: PretextModel, scenes: Sequence[PreparedScene]) -> EvalReport:
    logits = [model.forward(p.plan).logit_arrays() for p in scenes]
    return score(logits, scenes)


def perfect_logits(scenes: Sequence[PreparedScene], magnitude: float = 20.0) -> list[list[np.ndarray]]:
    """Labels mapped to +-magnitude: the perfect predictor."""
    return [[np.where(l > 0, magnitude, -magnitude) for l in p.targets.labels] for p in scenes]
