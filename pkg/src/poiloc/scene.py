"""Procedural scenes, camera trajectories and per-frame pixel samples.

A scene is a point cloud made of planar patches (walls, table tops, box
faces) plus uniform clutter. Every point carries an integer appearance id
that the feature encoder turns into a descriptor. Cameras orbit the scene
looking inwards.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from .errors import CoverageUnreachable, InvalidConfig, NotEnoughVisiblePoints
from .geometry import Intrinsics, Pose, project_points, Z_MIN

log = logging.getLogger(__name__)

OCCLUSION_TOL = 0.02
MIN_COVERAGE = 0.5
MAX_RETRIES = 10


class Source(enum.IntEnum):
    QUERY = 0
    RENDERED = 1


class TrajectoryStyle(str, enum.Enum):
    ORBIT = "orbit"
    WALK = "walk"


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass
class SceneConfig:
    point_count: int = 1000
    bounds_min: tuple = (-2.0, -2.0, 0.0)
    bounds_max: tuple = (2.0, 2.0, 3.0)
    # share of points placed on planar patches; the rest is uniform clutter
    plane_fraction: float = 0.8
    n_patches: int = 10
    seed: int = 7

    def validate(self) -> None:
        if int(self.point_count) < 1:
            raise InvalidConfig("scene.point_count must be >= 1")
        lo, hi = np.asarray(self.bounds_min, float), np.asarray(self.bounds_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise InvalidConfig("scene.bounds_min/bounds_max must describe a non-empty box")
        if not 0.0 <= self.plane_fraction <= 1.0:
            raise InvalidConfig("scene.plane_fraction must lie in [0, 1]")
        if self.n_patches < 1:
            raise InvalidConfig("scene.n_patches must be >= 1")


@dataclass
class SceneModel:
    points: np.ndarray          # (N, 3) world coordinates, metres
    appearance: np.ndarray      # (N,) integer appearance ids
    bounds: np.ndarray          # (2, 3) min/max corners
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def center(self) -> np.ndarray:
        return self.bounds.mean(axis=0)

    def __len__(self):
        return len(self.points)


def _patches(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int):
    """Axis-aligned rectangles: the floor, two walls, then tables and box faces."""
    ext = hi - lo
    patches = [
        # (origin, edge_u, edge_v)
        (lo.copy(), np.array([ext[0], 0, 0]), np.array([0, ext[1], 0])),
        (lo.copy(), np.array([ext[0], 0, 0]), np.array([0, 0, ext[2]])),
        (lo.copy(), np.array([0, ext[1], 0]), np.array([0, 0, ext[2]])),
    ]
    while len(patches) < n:
        size = rng.uniform(0.2, 0.45, size=3) * ext
        origin = lo + rng.uniform(0.05, 0.95, size=3) * (ext - size)
        axis = rng.integers(3)
        u_ax, v_ax = [a for a in range(3) if a != axis]
        eu = np.zeros(3)
        ev = np.zeros(3)
        eu[u_ax] = size[u_ax]
        ev[v_ax] = size[v_ax]
        patches.append((origin, eu, ev))
    return patches[:n]


def generate_scene(config: SceneConfig | None = None) -> SceneModel:
    config = config or SceneConfig()
    config.validate()
    lo = np.asarray(config.bounds_min, dtype=np.float64)
    hi = np.asarray(config.bounds_max, dtype=np.float64)
    rng = np.random.default_rng(config.seed)

    n = int(config.point_count)
    n_plane = int(round(config.plane_fraction * n))
    patches = _patches(rng, lo, hi, config.n_patches)
    areas = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev in patches])
    which = rng.choice(len(patches), size=n_plane, p=areas / areas.sum())
    st = rng.uniform(0.0, 1.0, size=(n_plane, 2))
    origins = np.array([p[0] for p in patches])[which]
    eus = np.array([p[1] for p in patches])[which]
    evs = np.array([p[2] for p in patches])[which]
    plane_pts = origins + st[:, :1] * eus + st[:, 1:] * evs
    clutter = rng.uniform(lo, hi, size=(n - n_plane, 3))
    points = np.clip(np.concatenate([plane_pts, clutter]), lo, hi)
    appearance = rng.permutation(n).astype(np.int64) + 1
    return SceneModel(points=points, appearance=appearance, bounds=np.stack([lo, hi]),
                      seed=int(config.seed), config=config)


def visible_mask(points: np.ndarray, pose: Pose, k: Intrinsics,
                 occlusion_tol: float = OCCLUSION_TOL) -> np.ndarray:
    """Frustum test plus a one-pixel z-buffer occlusion test."""
    uv, z = project_points(points, pose, k)
    inside = (z > Z_MIN) & k.contains(np.nan_to_num(uv, nan=-1.0, posinf=-1.0, neginf=-1.0))
    idx = np.flatnonzero(inside)
    mask = np.zeros(len(points), dtype=bool)
    if len(idx) == 0:
        return mask
    cells = uv[idx].astype(np.int64)
    flat = cells[:, 1] * k.width + cells[:, 0]
    zbuf = np.full(k.width * k.height, np.inf)
    np.minimum.at(zbuf, flat, z[idx])
    mask[idx] = z[idx] <= zbuf[flat] + occlusion_tol
    return mask


def coverage(scene: SceneModel, poses: list[Pose], k: Intrinsics) -> float:
    seen = np.zeros(len(scene), dtype=bool)
    for pose in poses:
        seen |= visible_mask(scene.points, pose, k)
    return float(seen.mean())


@dataclass
class TrajectoryConfig:
    radius: float = 4.0
    height: float = 1.8
    height_amplitude: float = 0.3
    target_height: float = 1.0
    angle_offset: float = 0.0
    # look-at target jitter (metres) and, for walks, step jitter
    jitter: float = 0.15
    seed: int = 0


def _orbit(scene, n, cfg, rng):
    c = scene.center
    poses = []
    for i in range(n):
        a = cfg.angle_offset + 2.0 * np.pi * i / n
        eye = np.array([c[0] + cfg.radius * np.cos(a), c[1] + cfg.radius * np.sin(a),
                        cfg.height + cfg.height_amplitude * np.sin(3.0 * a)])
        target = np.array([c[0], c[1], cfg.target_height]) + rng.normal(0.0, cfg.jitter, 3)
        poses.append(Pose.look_at(eye, target))
    return poses


def _walk(scene, n, cfg, rng):
    c = scene.center
    a = cfg.angle_offset
    r = cfg.radius
    h = cfg.height
    step = 2.0 * np.pi / max(n, 1)
    poses = []
    for _ in range(n):
        eye = np.array([c[0] + r * np.cos(a), c[1] + r * np.sin(a), h])
        target = np.array([c[0], c[1], cfg.target_height]) + rng.normal(0.0, 2 * cfg.jitter, 3)
        poses.append(Pose.look_at(eye, target))
        a += step * rng.uniform(0.5, 1.5)
        r = float(np.clip(r + rng.normal(0.0, cfg.jitter), 0.8 * cfg.radius, 1.2 * cfg.radius))
        h = float(np.clip(h + rng.normal(0.0, cfg.jitter),
                          cfg.height - cfg.height_amplitude, cfg.height + cfg.height_amplitude))
    return poses


def generate_trajectory(scene: SceneModel, n_frames: int,
                        style: TrajectoryStyle | str = TrajectoryStyle.ORBIT,
                        k: Intrinsics | None = None,
                        config: TrajectoryConfig | None = None) -> list[Pose]:
    """Camera poses looking into the scene with at least half the points covered.

    On insufficient coverage the radius is pulled back by 10% and the
    trajectory regenerated, up to ten times.
    """
    if n_frames < 1:
        raise InvalidConfig("n_frames must be >= 1")
    style = TrajectoryStyle(style)
    k = k or default_intrinsics()
    cfg = config or TrajectoryConfig()
    radius = cfg.radius
    for attempt in range(MAX_RETRIES + 1):
        rng = np.random.default_rng([cfg.seed, attempt])
        trial = TrajectoryConfig(**{**asdict(cfg), "radius": radius})
        poses = (_orbit if style is TrajectoryStyle.ORBIT else _walk)(scene, n_frames, trial, rng)
        cov = coverage(scene, poses, k)
        if cov >= MIN_COVERAGE:
            return poses
        log.debug("trajectory attempt %d coverage %.3f, retrying", attempt, cov)
        radius *= 1.1
    raise CoverageUnreachable(f"coverage {cov:.3f} < {MIN_COVERAGE} after {MAX_RETRIES} retries")


@dataclass(frozen=True)
class PixelSample:
    frame_id: int
    pixel: np.ndarray
    gt_coord: np.ndarray
    feature: np.ndarray | None
    source: Source
    corrupted: bool
    appearance: int = 0


@dataclass
class Frame:
    """One query or rendered view with its pixel samples stored column-wise."""

    frame_id: int
    pose: Pose
    intrinsics: Intrinsics
    pixels: np.ndarray          # (n, 2)
    gt_coords: np.ndarray       # (n, 3)
    appearance: np.ndarray      # (n,)
    source: Source = Source.QUERY
    corrupted: np.ndarray | None = None
    features: np.ndarray | None = None
    exposure: float = 0.0

    def __post_init__(self):
        if self.corrupted is None:
            self.corrupted = np.zeros(len(self.pixels), dtype=bool)

    def __len__(self):
        return len(self.pixels)

    @property
    def samples(self) -> list[PixelSample]:
        return list(self.iter_samples())

    def iter_samples(self) -> Iterator[PixelSample]:
        for i in range(len(self)):
            yield PixelSample(
                frame_id=self.frame_id, pixel=self.pixels[i], gt_coord=self.gt_coords[i],
                feature=None if self.features is None else self.features[i],
                source=self.source, corrupted=bool(self.corrupted[i]),
                appearance=int(self.appearance[i]))


def sample_query_pixels(scene: SceneModel, pose: Pose, k: Intrinsics, n_pixels: int,
                        frame_id: int = 0, seed: int = 0) -> Frame:
    """Draw ``n_pixels`` distinct visible scene points and record their projections."""
    if n_pixels < 1:
        raise InvalidConfig("n_pixels must be >= 1")
    vis = np.flatnonzero(visible_mask(scene.points, pose, k))
    if len(vis) < n_pixels:
        raise NotEnoughVisiblePoints(
            f"frame {frame_id}: {len(vis)} visible points, {n_pixels} requested")
    rng = np.random.default_rng([seed, frame_id])
    chosen = np.sort(rng.choice(vis, size=n_pixels, replace=False))
    gt = scene.points[chosen]
    uv, _ = project_points(gt, pose, k)
    return Frame(frame_id=frame_id, pose=pose, intrinsics=k, pixels=uv, gt_coords=gt.copy(),
                 appearance=scene.appearance[chosen].copy(), source=Source.QUERY)
