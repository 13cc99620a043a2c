"""Simulated novel-view rendering and information-gain pose selection.

The renderer is a stand-in for a splatting model: it emits pixel samples at
a new pose, but a blob-shaped region of each frame is corrupted. Inside the
region the pixel shows the right surface point at the wrong place (its
scene coordinate is displaced) and its descriptor is noisy. The whole frame
also carries an exposure offset on one feature channel.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, NoVisibleCandidates, NotEnoughVisiblePoints
from .features import FeatureEncoder
from .geometry import Intrinsics, Pose, project_points, so3_exp, Z_MIN
from .scene import Frame, SceneModel, Source, sample_query_pixels, visible_mask

log = logging.getLogger(__name__)

_REDRAWS = 100


@dataclass(frozen=True)
class CorruptionField:
    seed: int = 0
    corruption_fraction: float = 0.3
    blob_scale: float = 48.0
    coord_noise_sigma: float = 0.25
    feature_noise_sigma: float = 0.01
    exposure_shift: float = 0.2

    def validate(self) -> None:
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise InvalidConfig("render.corruption_fraction must lie in [0, 1]")
        if self.coord_noise_sigma < 0 or self.feature_noise_sigma < 0:
            raise InvalidConfig("render noise sigmas must be >= 0")
        if self.blob_scale <= 0:
            raise InvalidConfig("render.blob_scale must be > 0")

    def frame_seed(self, frame_id: int) -> int:
        return int(self.seed) ^ int(frame_id)


@dataclass(frozen=True)
class NovelPoseBudget:
    candidate_count: int = 64
    select_count: int = 16
    jitter_rot_deg: float = 4.0
    jitter_trans_m: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.select_count < 0 or self.candidate_count < 0:
            raise InvalidConfig("render budget counts must be >= 0")
        if self.select_count > self.candidate_count:
            raise InvalidConfig("render.select_count must not exceed render.candidate_count")


def value_noise(pixels: np.ndarray, k: Intrinsics, scale: float, seed: int) -> np.ndarray:
    """Bilinearly interpolated lattice noise with node spacing ``scale`` pixels."""
    nx = int(np.ceil(k.width / scale)) + 2
    ny = int(np.ceil(k.height / scale)) + 2
    lattice = np.random.default_rng([seed, 0xB10B]).uniform(size=(ny, nx))
    gx = np.clip(pixels[:, 0] / scale, 0.0, nx - 1.000001)
    gy = np.clip(pixels[:, 1] / scale, 0.0, ny - 1.000001)
    x0 = gx.astype(np.int64)
    y0 = gy.astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    # smoothstep keeps blob edges free of lattice creases
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    top = lattice[y0, x0] * (1 - fx) + lattice[y0, x0 + 1] * fx
    bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _image_grid(k: Intrinsics, stride: int = 4) -> np.ndarray:
    xs = np.arange(0.5 * stride, k.width, stride)
    ys = np.arange(0.5 * stride, k.height, stride)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def corruption_mask(pixels: np.ndarray, k: Intrinsics, field: CorruptionField,
                    frame_id: int) -> np.ndarray:
    """True where the frame's noise exceeds the image-wide (1 - fraction) quantile."""
    f = field.corruption_fraction
    if f <= 0.0:
        return np.zeros(len(pixels), dtype=bool)
    if f >= 1.0:
        return np.ones(len(pixels), dtype=bool)
    seed = field.frame_seed(frame_id)
    threshold = np.quantile(value_noise(_image_grid(k), k, field.blob_scale, seed), 1.0 - f)
    return value_noise(np.asarray(pixels, dtype=np.float64), k, field.blob_scale, seed) > threshold


def render_novel_frame(scene: SceneModel, pose: Pose, k: Intrinsics, n_pixels: int,
                       field: CorruptionField, frame_id: int = 0, seed: int = 0,
                       encoder: FeatureEncoder | None = None) -> Frame:
    field.validate()
    encoder = encoder or FeatureEncoder()
    frame = sample_query_pixels(scene, pose, k, n_pixels, frame_id=frame_id, seed=seed)
    frame.source = Source.RENDERED
    frame.exposure = float(field.exposure_shift)
    true_pixels = frame.pixels.copy()
    mask = corruption_mask(true_pixels, k, field, frame_id)
    rng = np.random.default_rng([field.frame_seed(frame_id), 0xC0DE])

    idx = np.flatnonzero(mask)
    if len(idx) and field.coord_noise_sigma > 0:
        coords = frame.gt_coords[idx].copy()
        pending = np.arange(len(idx))
        for _ in range(_REDRAWS):
            trial = frame.gt_coords[idx[pending]] + rng.normal(0.0, field.coord_noise_sigma,
                                                                size=(len(pending), 3))
            uv, z = project_points(trial, pose, k)
            ok = (z > Z_MIN) & k.contains(np.nan_to_num(uv, nan=-1.0))
            coords[pending[ok]] = trial[ok]
            pending = pending[~ok]
            if len(pending) == 0:
                break
        else:
            raise NotEnoughVisiblePoints(f"frame {frame_id}: corrupted pixels left the image")
        frame.gt_coords[idx] = coords
        frame.pixels[idx] = project_points(coords, pose, k)[0]
    frame.corrupted = mask

    # the rendered pixel shows the appearance of the original surface point
    feats = encoder.encode(frame.pixels, frame.appearance, pose, k, frame.exposure)
    if len(idx) and field.feature_noise_sigma > 0:
        body = feats.shape[1] - 1
        feats[idx, :body] += rng.normal(0.0, field.feature_noise_sigma, size=(len(idx), body))
    frame.features = feats
    return frame


def _slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        q = q0 + s * (q1 - q0)
        return q / np.linalg.norm(q)
    th = np.arccos(d)
    return (np.sin((1 - s) * th) * q0 + np.sin(s * th) * q1) / np.sin(th)


def candidate_poses(train_poses: list[Pose], budget: NovelPoseBudget) -> list[Pose]:
    """Jittered interpolations between consecutive training poses."""
    rng = np.random.default_rng([budget.seed, 0xF15E])
    n = len(train_poses)
    out = []
    for c in range(budget.candidate_count):
        a = train_poses[c % n]
        b = train_poses[(c + 1) % n]
        s = rng.uniform(0.0, 1.0)
        q = _slerp(a.rotation, b.rotation, s)
        t = (1 - s) * a.translation + s * b.translation
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.normal(0.0, budget.jitter_rot_deg))
        R = Pose(q, t).R @ so3_exp(axis * angle)
        t = t + rng.normal(0.0, budget.jitter_trans_m, size=3)
        out.append(Pose.from_rt(R, t))
    return out


def information_gain(visibility: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Gain of every candidate row: sum over visible points of 1 / (1 + prior count)."""
    return visibility.astype(np.float64) @ (1.0 / (1.0 + counts))


def greedy_select(visibility: np.ndarray, counts: np.ndarray, select_count: int) -> list[int]:
    counts = counts.astype(np.float64).copy()
    available = np.ones(len(visibility), dtype=bool)
    chosen = []
    for _ in range(select_count):
        gain = np.where(available, information_gain(visibility, counts), -np.inf)
        best = int(np.argmax(gain))
        chosen.append(best)
        available[best] = False
        counts += visibility[best]
    return chosen


def fisher_select(scene: SceneModel, train_poses: list[Pose], budget: NovelPoseBudget,
                  k: Intrinsics, candidates: list[Pose] | None = None) -> list[Pose]:
    """Greedy information-gain selection of novel poses to render.

    Each candidate is scored by how many rarely-observed scene points it
    sees; observation counts include the training poses and every pick made
    so far. Ties go to the lower candidate index.
    """
    budget.validate()
    if not train_poses:
        raise InvalidConfig("fisher_select needs at least one training pose")
    if budget.select_count == 0:
        return []
    candidates = candidates if candidates is not None else candidate_poses(train_poses, budget)
    vis = np.stack([visible_mask(scene.points, p, k) for p in candidates])
    if not vis.any():
        raise NoVisibleCandidates("no candidate pose sees any scene point")
    counts = np.zeros(len(scene), dtype=np.float64)
    for pose in train_poses:
        counts += visible_mask(scene.points, pose, k)
    picks = greedy_select(vis, counts, min(budget.select_count, len(candidates)))
    log.debug("fisher_select picked %s", picks)
    return [candidates[i] for i in picks]
