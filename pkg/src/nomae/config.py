"""Run configuration: one TOML table per module, strict keys, echo on save."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import AugmentConfig, PointFormat, SceneConfig
from .errors import InvalidConfig
from .geometry import BASE_VOXEL_SIZE, NUM_SCALES
from .masking import NUSCENES_TOTAL_RATIO, Strategy
from .model import ModelConfig
from .neighborhood import DEFAULT_SIDE
from .training import BATCH_SIZE, EPOCHS, WARMUP_EPOCHS, PipelineConfig, TrainConfig


@dataclass(frozen=True)
class GeometrySection:
    base_size: float = BASE_VOXEL_SIZE
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    num_scales: int = NUM_SCALES
    clip_min: tuple[float, float, float] | None = None
    clip_max: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class MaskingSection:
    total_ratio: float = NUSCENES_TOTAL_RATIO
    strategy: str = Strategy.HMG.value


@dataclass(frozen=True)
class NeighborhoodSection:
    side: int = DEFAULT_SIDE


@dataclass(frozen=True)
class ModelSection:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    decoder_channels: tuple[int, ...] | None = None
    encoder_blocks: int = 2
    decoder_layers: int = 2
    decoder_reach: int = 2
    head_depth: int = 1
    activation: str = "gelu"
    dtype: str = "float32"
    prior_bias_init: bool = True


@dataclass(frozen=True)
class OptimSection:
    lr: float = 2e-3
    weight_decay: float = 5e-2
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    warmup_epochs: float = WARMUP_EPOCHS
    steps: int | None = None


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    rotate: bool = True
    rotate_p: float = 0.5
    scale: bool = True
    flip: bool = True
    jitter: bool = True
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02


@dataclass(frozen=True)
class DataSection:
    synth: bool = True
    preset: str = "desk"  # desk | full
    num_scenes: int = 8
    scene_seed: int = 0
    holdout: int = 0  # trailing scenes kept out of training and used for eval
    paths: tuple[str, ...] = ()
    format: str = PointFormat.BIN_XYZI.value


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    checkpoint_every: int = 100
    overfit_one: bool = False


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    neighborhood: NeighborhoodSection = field(default_factory=NeighborhoodSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m = self.model
        n = 2 * m.decoder_layers * m.decoder_reach + 1
        if n != self.neighborhood.side:
            raise InvalidConfig(f"2*m*e+1 = {n} (m={m.decoder_layers}, e={m.decoder_reach}) "
                                f"but neighborhood side is {self.neighborhood.side}")
        if self.masking.strategy not in {s.value for s in Strategy}:
            raise InvalidConfig(f"unknown strategy {self.masking.strategy!r}")
        if self.data.preset not in ("desk", "full"):
            raise InvalidConfig(f"unknown scene preset {self.data.preset!r}")
        if self.data.format not in {f.value for f in PointFormat}:
            raise InvalidConfig(f"unknown point format {self.data.format!r}")
        if not self.data.synth and not self.data.paths:
            raise InvalidConfig("data.paths is empty and synth is disabled")
        if self.data.synth and not 0 <= self.data.holdout < self.data.num_scenes:
            raise InvalidConfig("holdout must leave at least one training scene")
        if self.run.seed < 0 or self.run.seed >= 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if self.run.checkpoint_every < 1:
            raise InvalidConfig("checkpoint_every must be >= 1")
        # building the module configs runs their own checks
        self.model_config()
        self.pipeline()
        self.train_config()

    # -- module configs

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_scales=self.geometry.num_scales, **dataclasses.asdict(self.model))

    def augment_config(self) -> AugmentConfig:
        a = self.augment
        return AugmentConfig(rotate=a.rotate, rotate_p=a.rotate_p, scale=a.scale, flip=a.flip,
                             jitter=a.jitter, jitter_sigma=a.jitter_sigma, jitter_clip=a.jitter_clip)

    def pipeline(self) -> PipelineConfig:
        g = self.geometry
        return PipelineConfig(base_size=g.base_size, origin=g.origin, num_scales=g.num_scales,
                              mask_ratio=self.masking.total_ratio, strategy=Strategy(self.masking.strategy),
                              neighborhood_side=self.neighborhood.side, clip_min=g.clip_min,
                              clip_max=g.clip_max, augment=self.augment_config())

    def train_config(self) -> TrainConfig:
        o = self.optim
        if self.run.overfit_one:
            return TrainConfig(steps=o.steps, epochs=o.epochs, batch_size=1, lr=o.lr,
                               weight_decay=o.weight_decay, warmup_epochs=0, seed=self.run.seed,
                               fixed_mask=True, augment=False)
        return TrainConfig(steps=o.steps, epochs=o.epochs, batch_size=o.batch_size, lr=o.lr,
                           weight_decay=o.weight_decay, warmup_epochs=o.warmup_epochs,
                           seed=self.run.seed, augment=self.augment.enabled)

    def scene_config(self, index: int) -> SceneConfig:
        seed = self.data.scene_seed + index
        return SceneConfig.desk(seed) if self.data.preset == "desk" else SceneConfig(seed=seed)

    # -- serialization

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, "")

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise InvalidConfig(f"config is not valid TOML: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise InvalidConfig(f"cannot read config {path}: {e}") from e
        return cls.loads(text)

    def replace(self, section: str, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def _coerce(tp, value, where: str):
    """Check ``value`` against annotation ``tp`` and convert lists to tuples."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(value) != len(args):
            raise InvalidConfig(f"{where}: expected {len(args)} values")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise InvalidConfig(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise InvalidConfig(f"{where}: expected a string")
        return value
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    raise InvalidConfig(f"{where}: unsupported field type {tp}")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where or 'config'}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in [{where or 'top level'}]: {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        kw[k] = _coerce(hints[k], v, f"{where}.{k}" if where else k)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise InvalidConfig(str(e)) from e
