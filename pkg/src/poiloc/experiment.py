"""Dataset construction and run orchestration shared by the CLI and tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .dataset import ROLE_RENDERED, ROLE_TEST, ROLE_TRAIN, Dataset
from .features import FeatureEncoder
from .pipeline import (EvalSummary, TrainMode, TrainResult, assemble, buffer_from_frames,
                       evaluate, mean_query_depth, train, train_c2f, train_clusters)
from .render import fisher_select, render_novel_frame
from .scene import (Frame, SceneModel, default_intrinsics, generate_scene, generate_trajectory,
                    sample_query_pixels)

log = logging.getLogger(__name__)

RENDER_ID_BASE = 100_000


def build_scene(cfg: ExperimentConfig) -> SceneModel:
    return generate_scene(cfg.scene.scene_config())


def _query_frames(scene, poses, cfg: ExperimentConfig, id0: int, seed: int,
                  enc: FeatureEncoder) -> list[Frame]:
    k = default_intrinsics()
    frames = []
    for i, pose in enumerate(poses):
        f = sample_query_pixels(scene, pose, k, cfg.scene.pixels_per_frame, frame_id=id0 + i, seed=seed)
        enc.encode_frame(f)
        frames.append(f)
    return frames


def build_dataset(cfg: ExperimentConfig, scene: SceneModel | None = None) -> Dataset:
    """Training and test query frames; no renders yet."""
    scene = scene or build_scene(cfg)
    sc = cfg.scene
    enc = FeatureEncoder(cfg.encoder)
    k = default_intrinsics()
    train_poses = generate_trajectory(scene, sc.n_train_frames, sc.trajectory, k,
                                      sc.trajectory_config(cfg.seed))
    test_poses = generate_trajectory(scene, sc.n_test_frames, sc.trajectory, k,
                                     sc.trajectory_config(cfg.seed, test=True))
    train_f = _query_frames(scene, train_poses, cfg, 0, cfg.seed, enc)
    test_f = _query_frames(scene, test_poses, cfg, sc.n_train_frames, cfg.seed + 1, enc)
    return Dataset(cfg.to_dict(), k, train_f + test_f,
                   [ROLE_TRAIN] * len(train_f) + [ROLE_TEST] * len(test_f), cfg.encoder.feature_dim)


def sparse_subset(frames: list[Frame], n: int | None) -> list[Frame]:
    """``n`` evenly spaced frames, or all of them."""
    if n is None or n >= len(frames):
        return list(frames)
    idx = np.unique(np.round(np.linspace(0, len(frames) - 1, n)).astype(int))
    return [frames[i] for i in idx]


def render_frames(cfg: ExperimentConfig, scene: SceneModel, train_frames: list[Frame]) -> list[Frame]:
    """Pick novel poses by information gain and render them."""
    k = default_intrinsics()
    budget = cfg.render.budget(cfg.seed)
    poses = fisher_select(scene, [f.pose for f in train_frames], budget, k)
    enc = FeatureEncoder(cfg.encoder)
    field = cfg.render.field(cfg.seed)
    return [render_novel_frame(scene, p, k, cfg.scene.pixels_per_frame, field,
                               frame_id=RENDER_ID_BASE + i, seed=cfg.seed, encoder=enc)
            for i, p in enumerate(poses)]


def add_renders(ds: Dataset, cfg: ExperimentConfig, scene: SceneModel | None = None) -> Dataset:
    scene = scene or build_scene(cfg)
    keep = [(f, r) for f, r in zip(ds.frames, ds.roles) if r != ROLE_RENDERED]
    train_f = sparse_subset([f for f, r in keep if r == ROLE_TRAIN], cfg.pipeline.sparse_frames)
    rendered = render_frames(cfg, scene, train_f)
    return Dataset(ds.config, ds.intrinsics, [f for f, _ in keep] + rendered,
                   [r for _, r in keep] + [ROLE_RENDERED] * len(rendered), ds.feature_dim)


@dataclass
class RunOutput:
    result: TrainResult
    heads: list
    summary: EvalSummary


def run_mode(cfg: ExperimentConfig, ds: Dataset, mode: TrainMode | str) -> RunOutput:
    """Train in ``mode`` on the dataset's (possibly sparse) training frames and evaluate."""
    mode = TrainMode(mode)
    query = sparse_subset(ds.train_frames, cfg.pipeline.sparse_frames)
    rendered = ds.rendered_frames
    tc = cfg.train_config()
    probe = buffer_from_frames(query, ds.intrinsics)
    loss_cfg = cfg.regressor.loss_config(mean_query_depth(probe))
    filt = cfg.filter.config(tc.n_iter)
    if cfg.pipeline.clusters > 1:
        results = train_clusters(query, rendered, mode, tc, filt, k=cfg.pipeline.clusters)
        heads = [r.head for r in results]
        result = results[0]
    else:
        buf = assemble(mode, query, rendered, filt, tc.seed)
        result = train(buf, mode, tc, filt, loss_cfg)
        heads = [result.head]
    summary = evaluate(heads, ds.test_frames, cfg.ransac.config(cfg.seed))
    return RunOutput(result, heads, summary)


def run_c2f(cfg: ExperimentConfig, ds: Dataset, coarse_only: bool = False) -> RunOutput:
    query = sparse_subset(ds.train_frames, cfg.pipeline.sparse_frames)
    tc = cfg.train_config()
    qbuf = buffer_from_frames(query, ds.intrinsics)
    rbuf = buffer_from_frames(ds.rendered_frames, ds.intrinsics)
    loss_cfg = cfg.regressor.loss_config(mean_query_depth(qbuf))
    result = train_c2f(rbuf, qbuf, cfg.pipeline.c2f(), tc, cfg.filter.config(tc.n_iter), loss_cfg,
                       coarse_only=coarse_only)
    summary = evaluate([result.head], ds.test_frames, cfg.ransac.config(cfg.seed))
    return RunOutput(result, [result.head], summary)
