"""Point-cloud files, augmentation and a ray-cast synthetic LiDAR scene generator."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidConfig, ParseError
from .geometry import PointCloud


class PointFormat(str, enum.Enum):
    BIN_XYZI = "bin_xyzi"
    ASCII_XYZ = "ascii_xyz"


def load_points(path: str | Path, fmt: PointFormat | str = PointFormat.BIN_XYZI) -> PointCloud:
    fmt = PointFormat(fmt)
    path = Path(path)
    if fmt == PointFormat.BIN_XYZI:
        raw = path.read_bytes()
        if len(raw) % 16:
            raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of 16")
        a = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
        return PointCloud(a[:, :3], a[:, 3], frame_id=path.stem)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 values, got {len(toks)}")
        try:
            rows.append([float(t) for t in toks])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return PointCloud(np.asarray(rows, dtype=np.float64).reshape(-1, 3), frame_id=path.stem)


def encode_bin_xyzi(cloud: PointCloud) -> bytes:
    a = np.zeros((len(cloud), 4), dtype="<f4")
    a[:, :3] = cloud.xyz
    if cloud.intensity is not None:
        a[:, 3] = cloud.intensity
    return a.tobytes()


def save_points(path: str | Path, cloud: PointCloud, fmt: PointFormat | str = PointFormat.BIN_XYZI) -> None:
    fmt = PointFormat(fmt)
    path = Path(path)
    if fmt == PointFormat.BIN_XYZI:
        path.write_bytes(encode_bin_xyzi(cloud))
    else:
        path.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in cloud.xyz.tolist()))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    rotate_p: float = 0.5
    rotate_range: tuple[float, float] = (-1.0, 1.0)  # fractions of pi
    scale: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip: bool = True
    flip_p: float = 0.5
    jitter: bool = True
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02

    def __post_init__(self):
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise InvalidConfig("scale range must be positive and ordered")
        if self.jitter_clip < 0 or self.jitter_sigma < 0:
            raise InvalidConfig("jitter sigma and clip must be >= 0")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(rotate=False, scale=False, flip=False, jitter=False)


def augment(cloud: PointCloud, cfg: AugmentConfig, seed: int) -> PointCloud:
    """rotate-z -> scale -> flip -> jitter, each independently toggleable."""
    rng = np.random.default_rng(seed)
    xyz = np.asarray(cloud.xyz, dtype=np.float64).copy()
    if cfg.rotate and rng.random() < cfg.rotate_p:
        lo, hi = cfg.rotate_range
        xyz = rotate_z(xyz, rng.uniform(lo, hi) * math.pi)
    if cfg.scale:
        xyz *= rng.uniform(*cfg.scale_range)
    if cfg.flip:
        if rng.random() < cfg.flip_p:
            xyz[:, 0] = -xyz[:, 0]
        if rng.random() < cfg.flip_p:
            xyz[:, 1] = -xyz[:, 1]
    if cfg.jitter and cfg.jitter_sigma > 0:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=xyz.shape)
        xyz += np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
    return PointCloud(xyz.astype(cloud.xyz.dtype), cloud.intensity, cloud.frame_id)


def rotate_z(xyz: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = xyz.copy()
    out[:, 0] = c * xyz[:, 0] - s * xyz[:, 1]
    out[:, 1] = s * xyz[:, 0] + c * xyz[:, 1]
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    ground_extent: float = 30.0  # objects are placed within this radius (m)
    boxes: tuple[int, int] = (4, 8)
    walls: tuple[int, int] = (1, 3)
    poles: tuple[int, int] = (3, 8)
    spheres: tuple[int, int] = (1, 3)
    sensor_height: float = 1.8
    azimuth_rays: int = 2048
    azimuth_range: tuple[float, float] = (-180.0, 180.0)  # degrees, field of view
    elevation_rays: int = 21  # ~34k points per default scene
    elevation_range: tuple[float, float] = (-25.0, 3.0)  # degrees
    max_range: float = 25.0
    min_range: float = 1.0
    dropout: float = 0.02
    keep_out: float = 3.0  # object-free radius around the sensor
    object_scale: float = 1.0  # multiplies every object dimension

    def __post_init__(self):
        if min(self.ground_extent, self.max_range, self.sensor_height, self.object_scale) <= 0:
            raise InvalidConfig("extents must be positive")
        if self.azimuth_rays < 1 or self.elevation_rays < 1:
            raise InvalidConfig("ray counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        for lo, hi in (self.boxes, self.walls, self.poles, self.spheres):
            if lo < 0 or hi < lo:
                raise InvalidConfig("object count ranges must be non-negative and ordered")

    @classmethod
    def desk(cls, seed: int = 0, **kw) -> "SceneConfig":
        """Compact front-facing scan: dense, small, cheap enough for CPU training."""
        base = dict(seed=seed, ground_extent=2.4, keep_out=1.0, object_scale=0.4, boxes=(1, 1), walls=(0, 1),
                    poles=(1, 2), spheres=(0, 1), azimuth_rays=128,
                    azimuth_range=(-45.0, 45.0), elevation_rays=40,
                    elevation_range=(-55.0, 20.0), max_range=2.5, min_range=0.3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def empty(cls, **kw) -> "SceneConfig":
        return cls(boxes=(0, 0), walls=(0, 0), poles=(0, 0), spheres=(0, 0), **kw)


@dataclass
class _Box:
    center: np.ndarray  # x, y, z of the box center
    half: np.ndarray
    yaw: float


@dataclass
class _Pole:
    xy: np.ndarray
    radius: float
    height: float


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float


@dataclass
class SceneLayout:
    boxes: list[_Box] = field(default_factory=list)
    poles: list[_Pole] = field(default_factory=list)
    spheres: list[_Sphere] = field(default_factory=list)


_PLACE_TRIES = 64


def _footprint_distance(xy: np.ndarray, half_xy, yaw: float) -> float:
    """Distance from the sensor (xy origin) to a yawed rectangle centered at ``xy``."""
    c, s = math.cos(-yaw), math.sin(-yaw)
    p = -xy
    local = np.array([c * p[0] - s * p[1], s * p[0] + c * p[1]])
    return float(np.hypot(*np.maximum(np.abs(local) - half_xy, 0.0)))


def _place(rng, cfg: SceneConfig, half_xy, yaw: float) -> np.ndarray:
    """Bearing inside the field of view, range up to the extent, footprint clear of ``keep_out``.

    Falls back to pushing the object out along its bearing when no draw clears.
    """
    extent = cfg.ground_extent
    lo = min(cfg.keep_out, 0.5 * extent)
    for _ in range(_PLACE_TRIES):
        r = rng.uniform(lo, extent)
        a = math.radians(rng.uniform(*cfg.azimuth_range))
        xy = np.array([r * math.cos(a), r * math.sin(a)])
        if _footprint_distance(xy, half_xy, yaw) >= cfg.keep_out:
            return xy
    return xy * (cfg.keep_out + float(np.hypot(*half_xy))) / max(float(np.hypot(*xy)), 1e-9)


def scene_layout(cfg: SceneConfig, rng: np.random.Generator) -> SceneLayout:
    lay = SceneLayout()
    k = cfg.object_scale
    for lo_hi, dims in ((cfg.boxes, ((0.8, 2.5), (0.8, 1.2), (0.7, 1.3))),
                        (cfg.walls, ((4.0, 10.0), (0.15, 0.15), (1.0, 2.0)))):
        for _ in range(rng.integers(lo_hi[0], lo_hi[1] + 1)):
            half = k * np.array([rng.uniform(*d) for d in dims])
            yaw = rng.uniform(-math.pi, math.pi)
            xy = _place(rng, cfg, half[:2], yaw)
            lay.boxes.append(_Box(np.array([xy[0], xy[1], half[2]]), half, yaw))
    for _ in range(rng.integers(cfg.poles[0], cfg.poles[1] + 1)):
        radius, height = k * rng.uniform(0.08, 0.25), k * rng.uniform(3.0, 7.0)
        xy = _place(rng, cfg, (radius, radius), 0.0)
        lay.poles.append(_Pole(xy, radius, height))
    for _ in range(rng.integers(cfg.spheres[0], cfg.spheres[1] + 1)):
        r = k * rng.uniform(0.5, 1.5)
        xy = _place(rng, cfg, (r, r), 0.0)
        lay.spheres.append(_Sphere(np.array([xy[0], xy[1], r]), r))
    return lay


def _hit_box(o: np.ndarray, d: np.ndarray, box: _Box) -> np.ndarray:
    """Slab test in the box frame; returns entry distance or inf."""
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    lo_o = rot @ (o - box.center)
    ld = d @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-box.half - lo_o) * inv
        t2 = (box.half - lo_o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_pole(o: np.ndarray, d: np.ndarray, pole: _Pole) -> np.ndarray:
    oc = o[:2] - pole.xy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (d[:, 0] * oc[0] + d[:, 1] * oc[1])
    c = oc @ oc - pole.radius**2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = o[2] + t * d[:, 2]
    ok = (disc >= 0) & (t > 0) & (z >= 0) & (z <= pole.height)
    return np.where(ok, t, np.inf)


def _hit_sphere(o: np.ndarray, d: np.ndarray, sph: _Sphere) -> np.ndarray:
    oc = o - sph.center
    b = 2 * d @ oc
    c = oc @ oc - sph.radius**2
    disc = b * b - 4 * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / 2
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def ray_directions(cfg: SceneConfig) -> np.ndarray:
    lo, hi = np.deg2rad(cfg.azimuth_range)
    az = lo + np.arange(cfg.azimuth_rays) * ((hi - lo) / cfg.azimuth_rays)
    el = np.deg2rad(np.linspace(cfg.elevation_range[0], cfg.elevation_range[1], cfg.elevation_rays))
    A, E = np.meshgrid(az, el, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
    return d.reshape(-1, 3)


def synth_scene(cfg: SceneConfig) -> PointCloud:
    """First-hit ray casting from the sensor against ground + primitives.

    Points are expressed in a frame whose z = 0 is the ground plane.
    """
    rng = np.random.default_rng(cfg.seed)
    layout = scene_layout(cfg, rng)
    origin = np.array([0.0, 0.0, cfg.sensor_height])
    d = ray_directions(cfg)
    with np.errstate(divide="ignore"):
        t_ground = np.where(d[:, 2] < 0, -cfg.sensor_height / d[:, 2], np.inf)
    t = t_ground
    for box in layout.boxes:
        t = np.minimum(t, _hit_box(origin, d, box))
    for pole in layout.poles:
        t = np.minimum(t, _hit_pole(origin, d, pole))
    for sph in layout.spheres:
        t = np.minimum(t, _hit_sphere(origin, d, sph))
    keep = (t >= cfg.min_range) & (t <= cfg.max_range)
    keep &= rng.random(t.shape[0]) >= cfg.dropout
    pts = origin + t[keep, None] * d[keep]
    on_ground = t[keep] == t_ground[keep]
    pts[on_ground, 2] = 0.0  # exact plane, no rounding residue
    intensity = rng.uniform(0.0, 1.0, size=pts.shape[0]).astype(np.float32)
    return PointCloud(pts.astype(np.float32), intensity, frame_id=f"synth-{cfg.seed}")
