"""Pretext network: sparse-conv encoder, coarse-to-fine fusion, per-scale decoders.

The encoder sees only the finest visible voxels.  Each scale gets its own
neighborhood decoder: ``m`` expansion convolutions of reach ``e`` grow the
active set from the visible voxels of that scale by ``m * e`` voxels, ``c``
submanifold head layers refine it, and a pointwise projection yields one
occupancy logit per target coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coords import CoordSet
from .errors import CoverageError, EmptyInput, EmptyScale, InvalidConfig
from .geometry import SparseOccupancy
from .masking import MaskAssignment
from .neighborhood import NeighborhoodSpec, TargetSet
from .sparsenn import autograd as ag
from .sparsenn import ops
from .sparsenn.autograd import Tensor
from .sparsenn.ops import SparseFeatureMap, num_taps
from .sparsenn.optim import ParamStore

IN_CHANNELS = 4


@dataclass(frozen=True)
class ModelConfig:
    num_scales: int = 4
    channels: tuple[int, ...] = (32, 64, 128, 256)
    encoder_blocks: int = 2
    decoder_layers: int = 2  # m
    decoder_reach: int = 2  # e; a kernel parameter k maps to e = k - 1
    head_depth: int = 1  # c
    decoder_channels: tuple[int, ...] | None = None  # defaults to the fused width
    activation: str = "gelu"
    dtype: str = "float32"
    prior_bias_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.decoder_channels is not None:
            object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.num_scales < 2:
            raise InvalidConfig("the model needs at least 2 scales")
        if len(self.channels) != self.num_scales:
            raise InvalidConfig("one channel width per scale is required")
        if self.decoder_channels is not None and len(self.decoder_channels) != self.num_scales:
            raise InvalidConfig("one decoder width per scale is required")
        if self.decoder_layers < 1 or self.decoder_reach < 1:
            raise InvalidConfig("decoder needs m >= 1 layers of reach e >= 1")
        if self.head_depth < 0 or self.encoder_blocks < 0:
            raise InvalidConfig("head depth and encoder blocks must be >= 0")
        if self.activation not in ("gelu", "relu"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"unsupported dtype {self.dtype!r}")

    @property
    def neighborhood_side(self) -> int:
        return 2 * self.decoder_layers * self.decoder_reach + 1

    @classmethod
    def from_kernel(cls, m: int, k: int, **kw) -> "ModelConfig":
        """Build from the (m, k) naming, where reach e = k - 1 and n = 2m(k-1)+1."""
        return cls(decoder_layers=m, decoder_reach=k - 1, **kw)

    def neighborhood(self) -> NeighborhoodSpec:
        return NeighborhoodSpec.uniform(self.neighborhood_side, self.num_scales)

    def check_neighborhood(self, spec: NeighborhoodSpec) -> None:
        if spec.num_scales != self.num_scales:
            raise InvalidConfig("neighborhood spec and model disagree on the scale count")
        for s, n in enumerate(spec.sides):
            if n != self.neighborhood_side:
                raise InvalidConfig(f"scale {s}: 2*m*e+1 = {self.neighborhood_side} but n_s = {n}")

    def decoder_width(self, s: int) -> int:
        return self.channels[s] if self.decoder_channels is None else self.decoder_channels[s]


def voxel_features(occ: SparseOccupancy, dtype=np.float32) -> np.ndarray:
    """(log1p(count), centroid offset - 0.5) per voxel."""
    f = np.empty((len(occ), IN_CHANNELS), dtype=np.float64)
    f[:, 0] = np.log1p(occ.counts)
    f[:, 1:] = occ.offsets - 0.5
    return f.astype(dtype)


@dataclass(eq=False)
class ScenePlan:
    """Everything the forward pass needs from one masked scene.

    Only the finest visible voxels (with payloads), the visible coordinate
    set of every scale and the target coordinates enter the network; labels
    are kept alongside for the loss.
    """

    visible_input: SparseOccupancy
    visible: tuple[CoordSet, ...]
    targets: TargetSet

    @classmethod
    def build(cls, visible_input: SparseOccupancy, assignment: MaskAssignment,
              targets: TargetSet) -> "ScenePlan":
        if len(visible_input) == 0:
            raise EmptyInput("encoder input is empty")
        vis = tuple(assignment.visible(s) for s in range(assignment.num_scales))
        return cls(visible_input, vis, targets)

    @property
    def num_scales(self) -> int:
        return len(self.visible)

    def translate(self, delta_finest) -> "ScenePlan":
        d = np.asarray(delta_finest, dtype=np.int64)
        v0 = self.visible_input
        shifted = SparseOccupancy(v0.scale, v0.base_size, v0.coords.translate(d), v0.counts, v0.offsets)
        vis = tuple(c.translate(d // (1 << s)) for s, c in enumerate(self.visible))
        tgt = TargetSet(tuple(c.translate(d // (1 << s)) for s, c in enumerate(self.targets.coords)),
                        self.targets.labels)
        return ScenePlan(shifted, vis, tgt)


@dataclass(eq=False)
class ForwardOutput:
    logits: list[SparseFeatureMap]
    encoded: list[SparseFeatureMap] = field(default_factory=list)
    fused: list[SparseFeatureMap] = field(default_factory=list)

    def logit_arrays(self) -> list[np.ndarray]:
        return [l.features.data.reshape(-1) for l in self.logits]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class PretextModel:
    """Parameters plus the forward pass of the whole pretext network."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        self._init(np.random.default_rng(seed))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def _conv_param(self, rng, name, reach, cin, cout):
        k = num_taps(reach)
        self.params.add(f"{name}.w", _uniform(rng, (k, cin, cout), k * cin, self.dtype))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=self.dtype))

    def _linear_param(self, rng, name, cin, cout):
        self.params.add(f"{name}.w", _uniform(rng, (cin, cout), cin, self.dtype))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=self.dtype))

    def _init(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        ch = cfg.channels
        S = cfg.num_scales
        self._linear_param(rng, "enc.stem", IN_CHANNELS, ch[0])
        for s in range(S):
            for b in range(cfg.encoder_blocks):
                self._conv_param(rng, f"enc.s{s}.block{b}", 1, ch[s], ch[s])
            if s < S - 1:
                self._linear_param(rng, f"enc.s{s}.down", ch[s], ch[s + 1])
        for s in range(S):
            if s < S - 1:
                self._linear_param(rng, f"up.s{s}.proj", ch[s] + ch[s + 1], ch[s])
            self._conv_param(rng, f"up.s{s}.block", 1, ch[s], ch[s])
        for s in range(S):
            w = cfg.decoder_width(s)
            self.params.add(f"dec.s{s}.fill", np.zeros(ch[s], dtype=self.dtype))
            cin = ch[s]
            for l in range(cfg.decoder_layers):
                self._conv_param(rng, f"dec.s{s}.expand{l}", cfg.decoder_reach, cin, w)
                cin = w
            for l in range(cfg.head_depth):
                self._conv_param(rng, f"dec.s{s}.head{l}", 1, cin, cin)
            self._linear_param(rng, f"dec.s{s}.out", cin, 1)

    # ------------------------------------------------------------------

    def _act(self, x: SparseFeatureMap) -> SparseFeatureMap:
        return ops.gelu(x) if self.cfg.activation == "gelu" else ops.relu(x)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def encode(self, visible: SparseOccupancy) -> list[SparseFeatureMap]:
        if len(visible) == 0:
            raise EmptyInput("encoder input is empty")
        feats = ag.constant(voxel_features(visible, self.dtype))
        x = SparseFeatureMap(visible.coords, feats, 0)
        x = self._act(ops.linear(x, self._p("enc.stem.w"), self._p("enc.stem.b")))
        out = []
        S = self.cfg.num_scales
        for s in range(S):
            for b in range(self.cfg.encoder_blocks):
                name = f"enc.s{s}.block{b}"
                h = ops.submanifold_conv(x, self._p(f"{name}.w"), self._p(f"{name}.b"))
                x = ops.add(x, self._act(h))
            out.append(x)
            if s < S - 1:
                x = ops.pool_down(x)
                x = ops.linear(x, self._p(f"enc.s{s}.down.w"), self._p(f"enc.s{s}.down.b"))
        return out

    def upsample_fuse(self, encoded: list[SparseFeatureMap]) -> list[SparseFeatureMap]:
        S = self.cfg.num_scales
        fused: list[SparseFeatureMap] = [None] * S
        for s in range(S - 1, -1, -1):
            x = encoded[s]
            if s < S - 1:
                up = ops.unpool_up(fused[s + 1], x.coords)
                x = ops.linear(ops.concat(x, up), self._p(f"up.s{s}.proj.w"), self._p(f"up.s{s}.proj.b"))
            x = ops.submanifold_conv(x, self._p(f"up.s{s}.block.w"), self._p(f"up.s{s}.block.b"))
            fused[s] = self._act(x)
        return fused

    def decode_active(self, fused: SparseFeatureMap, s: int, seeds: CoordSet) -> SparseFeatureMap:
        """Logits of scale ``s`` on the decoder's whole active set, dilate(seeds, m * e).

        ``seeds`` is the visible set of scale ``s``; it contains every encoded
        coordinate of that scale, and coarse voxels that are visible but have
        no visible finest descendant start from a learned fill vector.
        """
        cfg = self.cfg
        x = ops.embed(fused, seeds, self._p(f"dec.s{s}.fill"))
        for l in range(cfg.decoder_layers):
            name = f"dec.s{s}.expand{l}"
            x = self._act(ops.expansion_conv(x, self._p(f"{name}.w"), self._p(f"{name}.b")))
        for l in range(cfg.head_depth):
            name = f"dec.s{s}.head{l}"
            x = self._act(ops.submanifold_conv(x, self._p(f"{name}.w"), self._p(f"{name}.b")))
        return ops.linear(x, self._p(f"dec.s{s}.out.w"), self._p(f"dec.s{s}.out.b"))

    def decode_scale(self, fused: SparseFeatureMap, s: int, seeds: CoordSet,
                     target: CoordSet) -> SparseFeatureMap:
        """Occupancy logits of scale ``s`` on exactly ``target``."""
        return ops.select(self.decode_active(fused, s, seeds), target)

    def forward(self, plan: ScenePlan) -> ForwardOutput:
        if plan.num_scales != self.cfg.num_scales:
            raise InvalidConfig("plan and model disagree on the scale count")
        encoded = self.encode(plan.visible_input)
        fused = self.upsample_fuse(encoded)
        logits = []
        for s in range(self.cfg.num_scales):
            logits.append(self.decode_scale(fused[s], s, plan.visible[s], plan.targets.coords[s]))
        return ForwardOutput(logits, encoded, fused)

    def init_head_bias(self, targets: list[TargetSet]) -> None:
        """Set each scale's output bias to the logit of its positive-label rate."""
        for s in range(self.cfg.num_scales):
            pos = sum(int(t.labels[s].sum()) for t in targets)
            tot = sum(len(t.coords[s]) for t in targets)
            if tot == 0:
                continue
            p = min(max(pos / tot, 1e-4), 1 - 1e-4)
            self.params[f"dec.s{s}.out.b"].data[...] = math.log(p / (1 - p))


def pretext_loss(out: ForwardOutput, targets: TargetSet) -> tuple[Tensor, list[float]]:
    """Mean over scales of the mean BCE over each scale's target coordinates."""
    per_scale = []
    for s, (logits, coords, labels) in enumerate(zip(out.logits, targets.coords, targets.labels)):
        if len(coords) == 0:
            raise EmptyScale(f"scale {s} has an empty reconstruction domain")
        per_scale.append(ops.bce_with_logits(logits, labels, coords))
    total = ag.mean_scalars(per_scale)
    return total, [float(l.data) for l in per_scale]


def batch_loss(model: PretextModel, plans: list[ScenePlan]) -> tuple[Tensor, list[float]]:
    """Per-scene losses averaged over the batch."""
    if not plans:
        raise EmptyInput("empty batch")
    losses, comps = [], []
    for plan in plans:
        out = model.forward(plan)
        l, parts = pretext_loss(out, plan.targets)
        losses.append(l)
        comps.append(parts)
    per_scale = np.mean(np.asarray(comps), axis=0).tolist()
    return ag.mean_scalars(losses), per_scale


def check_coverage(model: PretextModel, plan: ScenePlan) -> None:
    """Raise CoverageError if any target lies beyond the decoder reach."""
    R = model.cfg.decoder_layers * model.cfg.decoder_reach
    for s in range(plan.num_scales):
        reach = plan.visible[s].dilate(R)
        if not plan.targets.coords[s].isin(reach).all():
            raise CoverageError(f"scale {s}: targets extend beyond the decoder reach {R}")
