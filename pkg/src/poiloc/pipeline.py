"""Training and evaluation loops for the four ablation modes and the
coarse-to-fine sparse-input variant.

Modes:

``BASE``  query pixels only.
``POA``   query plus every rendered pixel, weight one.
``POR``   query plus a random rendered subset the size of the PoI subsample,
          down-weighted on the same schedule but never gated.
``POI``   query plus the Bernoulli subsample, gated and down-weighted.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBuffer, EmptyQuerySet, InvalidConfig, KeyMismatch, PoiLocError
from .geometry import Intrinsics, Pose, rotation_error_deg, translation_error_m
from .pnp import RansacConfig, ransac_pnp, select_model
from .poi import FilterConfig, GateInputs, PoiLedger, Status, pixel_keys, poi_weight, subsample
from .regressor import (Cameras, LossConfig, MlpHead, OptState, backward_from_terms,
                        gate_statistic, opt_step, pixel_losses)
from .scene import Frame, Source

log = logging.getLogger(__name__)


class TrainMode(str, enum.Enum):
    BASE = "base"
    POA = "poa"
    POR = "por"
    POI = "poi"


@dataclass
class TrainConfig:
    n_iter: int = 6000
    batch_size: int = 512
    base_lr: float = 1e-2
    warmup_fraction: float = 0.1
    hidden: tuple = (128, 128, 128)
    seed: int = 0

    def validate(self) -> None:
        if self.n_iter < 1:
            raise InvalidConfig("pipeline.n_iter must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("pipeline.batch_size must be >= 1")
        if self.base_lr <= 0:
            raise InvalidConfig("pipeline.base_lr must be > 0")


@dataclass
class C2fConfig:
    coarse_tau_r: float = 15.0
    coarse_iters: int = 3000
    fine_iters: int = 6000
    fine_lr_scale: float = 0.3
    final_unfiltered_fraction: float = 0.1

    def validate(self, tau_r: float) -> None:
        if self.coarse_tau_r < tau_r:
            raise InvalidConfig("c2f.coarse_tau_r must be >= filter.tau_r")
        if not 0.0 < self.fine_lr_scale <= 1.0:
            raise InvalidConfig("c2f.fine_lr_scale must lie in (0, 1]")
        if not 0.0 <= self.final_unfiltered_fraction < 1.0:
            raise InvalidConfig("c2f.final_unfiltered_fraction must lie in [0, 1)")
        if self.coarse_iters < 1 or self.fine_iters < 1:
            raise InvalidConfig("c2f stage iteration counts must be >= 1")


@dataclass
class SampleBuffer:
    """Flat, shuffled store of training pixels.

    ``origin`` is the provenance index of each row in the unshuffled
    concatenation of the input frames; ``ledger_row`` points rendered pixels
    at their ledger entry (-1 for query pixels and untracked renders).
    """

    frame_ids: np.ndarray
    pixels: np.ndarray
    features: np.ndarray
    gt_coords: np.ndarray
    source: np.ndarray
    corrupted: np.ndarray       # oracle only; never read by training
    origin: np.ndarray
    poses: dict
    k: Intrinsics
    ledger_row: np.ndarray | None = None
    ledger: PoiLedger | None = None

    def __len__(self):
        return len(self.frame_ids)

    @property
    def is_query(self) -> np.ndarray:
        return self.source == Source.QUERY

    def take(self, rows: np.ndarray) -> "SampleBuffer":
        rows = np.asarray(rows, dtype=np.int64)
        return SampleBuffer(
            self.frame_ids[rows], self.pixels[rows], self.features[rows], self.gt_coords[rows],
            self.source[rows], self.corrupted[rows], self.origin[rows], dict(self.poses), self.k,
            None if self.ledger_row is None else self.ledger_row[rows], self.ledger)

    def cameras(self) -> tuple[Cameras, np.ndarray]:
        """Camera table plus each row's index into it."""
        ids = sorted(self.poses)
        lookup = {f: i for i, f in enumerate(ids)}
        cams = Cameras.from_poses([self.poses[f] for f in ids], self.k)
        return cams, np.array([lookup[f] for f in self.frame_ids.tolist()], dtype=np.int64)


def _stack(frames: list[Frame]):
    if not frames:
        return None
    return dict(
        frame_ids=np.concatenate([np.full(len(f), f.frame_id, dtype=np.int64) for f in frames]),
        pixels=np.concatenate([f.pixels for f in frames]).astype(np.float32),
        features=np.concatenate([f.features for f in frames]).astype(np.float32),
        gt_coords=np.concatenate([f.gt_coords for f in frames]).astype(np.float32),
        source=np.concatenate([np.full(len(f), int(f.source), dtype=np.int8) for f in frames]),
        corrupted=np.concatenate([f.corrupted for f in frames]).astype(bool),
    )


def buffer_from_frames(frames: list[Frame], k: Intrinsics) -> SampleBuffer:
    cols = _stack(frames)
    if cols is None:
        raise EmptyBuffer("no frames to buffer")
    n = len(cols["frame_ids"])
    return SampleBuffer(origin=np.arange(n), poses={f.frame_id: f.pose for f in frames}, k=k,
                        ledger_row=np.full(n, -1, dtype=np.int64), **cols)


def concat_buffers(a: SampleBuffer, b: SampleBuffer) -> SampleBuffer:
    out = SampleBuffer(
        *(np.concatenate([getattr(a, f), getattr(b, f)]) for f in
          ("frame_ids", "pixels", "features", "gt_coords", "source", "corrupted")),
        origin=np.concatenate([a.origin, b.origin + len(a)]),
        poses={**a.poses, **b.poses}, k=a.k,
        ledger_row=np.concatenate([a.ledger_row, b.ledger_row]))
    return out


def shuffle_buffer(buf: SampleBuffer, seed: int) -> SampleBuffer:
    perm = np.random.default_rng([seed, 0x5A]).permutation(len(buf))
    return buf.take(perm)


def expected_poi_count(n_rendered: int, p: float, seed: int) -> int:
    return int(np.count_nonzero(subsample(n_rendered, p, seed)))


def assemble(mode: TrainMode | str, query_frames: list[Frame], rendered_frames: list[Frame],
             filter_cfg: FilterConfig | None = None, seed: int = 0) -> SampleBuffer:
    """Build the shuffled training buffer for ``mode``."""
    mode = TrainMode(mode)
    filter_cfg = filter_cfg or FilterConfig()
    if not query_frames or sum(len(f) for f in query_frames) == 0:
        raise EmptyQuerySet("at least one query pixel is required")
    k = query_frames[0].intrinsics
    query = buffer_from_frames(query_frames, k)
    if mode is TrainMode.BASE or not rendered_frames:
        return shuffle_buffer(query, seed)
    rend = buffer_from_frames(rendered_frames, k)
    if mode is TrainMode.POA:
        keep = np.ones(len(rend), dtype=bool)
    elif mode is TrainMode.POI:
        keep = subsample(len(rend), filter_cfg.bernoulli_p, seed)
    else:
        count = expected_poi_count(len(rend), filter_cfg.bernoulli_p, seed)
        keep = np.zeros(len(rend), dtype=bool)
        keep[np.random.default_rng([seed, 0x90E]).choice(len(rend), count, replace=False)] = True
    rend = rend.take(np.flatnonzero(keep))
    rend.origin = np.flatnonzero(keep)
    if mode is TrainMode.POI:
        rend.ledger = PoiLedger(rend.frame_ids, rend.pixels)
        rend.ledger_row = np.arange(len(rend))
    buf = concat_buffers(query, rend)
    buf.ledger = rend.ledger
    return shuffle_buffer(buf, seed)


@dataclass
class LogRecord:
    iteration: int
    mean_loss: float
    active_rendered: int
    omega: float


@dataclass
class TrainResult:
    head: MlpHead
    ledger: PoiLedger | None
    log: list[LogRecord]
    opt: OptState
    wall_time: float = 0.0


def mean_query_depth(buf: SampleBuffer) -> float:
    q = np.flatnonzero(buf.is_query)
    if len(q) == 0:
        q = np.arange(len(buf))
    depths = []
    for f in np.unique(buf.frame_ids[q]):
        rows = q[buf.frame_ids[q] == f]
        depths.append(buf.poses[int(f)].to_camera(buf.gt_coords[rows].astype(np.float64))[:, 2])
    return float(np.mean(np.concatenate(depths)))


def default_loss_config(buf: SampleBuffer, loss_cfg: LossConfig | None) -> LossConfig:
    if loss_cfg is not None:
        return loss_cfg
    return LossConfig(pseudo_depth_m=mean_query_depth(buf))


def _init_head(buf: SampleBuffer, cfg: TrainConfig, center: np.ndarray | None) -> MlpHead:
    widths = [buf.features.shape[1], *cfg.hidden, 3]
    if center is None:
        center = np.mean([p.translation for p in buf.poses.values()], axis=0)
    return MlpHead.init(widths, seed=cfg.seed, output_bias=center)


@dataclass
class _Stage:
    """One pass of the iteration loop; shared by plain and coarse-to-fine training."""

    buf: SampleBuffer
    mode: TrainMode
    head: MlpHead
    opt: OptState
    loss_cfg: LossConfig
    filter_cfg: FilterConfig
    batch_size: int
    rng: np.random.Generator
    tau_r: float | None = None
    query_share: tuple | None = None     # (start, end) batch share of query rows
    log: list = field(default_factory=list)

    def run(self, n_iter: int, iter_offset: int = 0) -> None:
        buf = self.buf
        cams, cam_idx = buf.cameras()
        is_query = buf.is_query
        q_rows = np.flatnonzero(is_query)
        ledger = buf.ledger
        tracked = buf.ledger_row >= 0
        gate_from = self.filter_cfg.gate_start_fraction * self.filter_cfg.n_iter
        for it in range(n_iter):
            if ledger is not None:
                alive = is_query | ~tracked
                alive[tracked] = ledger.active[buf.ledger_row[tracked]]
            else:
                alive = np.ones(len(buf), dtype=bool)
            rows = self._draw(alive, is_query, q_rows, it, n_iter)
            pred, cache = self.head.forward_cache(buf.features[rows])
            terms = pixel_losses(pred, buf.pixels[rows].astype(np.float64), cam_idx[rows], cams,
                                 self.loss_cfg)
            weights = np.ones(len(rows))
            rend = ~is_query[rows]
            omega = 1.0
            if self.mode in (TrainMode.POI, TrainMode.POR):
                omega = self._omega(it)
                weights[rend] = omega
            if self.mode is TrainMode.POI and ledger is not None:
                sel = rend & tracked[rows]
                norms = np.linalg.norm(terms.grad[sel], axis=1)
                inputs = GateInputs(rows=buf.ledger_row[rows[sel]],
                                    grad_stat=gate_statistic(norms, omega, len(rows), buf.k),
                                    reproj=terms.reproj[sel])
                weights[sel] = ledger.apply_iteration(inputs, it, self.filter_cfg,
                                                      gate_enabled=it >= gate_from, tau_r=self.tau_r)
            res = backward_from_terms(self.head, cache, terms, weights, pred)
            opt_step(self.head, res.grads, self.opt)
            active = ledger.active_count() if ledger is not None else int(np.count_nonzero(~is_query))
            self.log.append(LogRecord(iter_offset + it, res.loss, active, omega))

    def _omega(self, it: int) -> float:
        return poi_weight(min(it, self.filter_cfg.n_iter), self.filter_cfg)

    def _draw(self, alive, is_query, q_rows, it, n_iter) -> np.ndarray:
        pool = np.flatnonzero(alive)
        b = min(self.batch_size, len(pool))
        if self.query_share is None:
            return np.sort(self.rng.choice(pool, size=b, replace=False))
        s0, s1 = self.query_share
        share = s0 + (s1 - s0) * it / max(n_iter - 1, 1)
        r_pool = np.flatnonzero(alive & ~is_query)
        n_q = min(len(q_rows), int(round(share * b)))
        n_r = min(len(r_pool), b - n_q)
        n_q = min(len(q_rows), b - n_r)
        return np.sort(np.concatenate([self.rng.choice(q_rows, n_q, replace=False),
                                       self.rng.choice(r_pool, n_r, replace=False)]))


def train(buf: SampleBuffer, mode: TrainMode | str, cfg: TrainConfig | None = None,
          filter_cfg: FilterConfig | None = None, loss_cfg: LossConfig | None = None,
          center: np.ndarray | None = None) -> TrainResult:
    """Train one head on ``buf``. Deterministic given the configs."""
    mode = TrainMode(mode)
    cfg = cfg or TrainConfig()
    cfg.validate()
    if len(buf) == 0:
        raise EmptyBuffer("training buffer is empty")
    filter_cfg = FilterConfig(**{**vars(filter_cfg or FilterConfig()), "n_iter": cfg.n_iter})
    filter_cfg.validate()
    loss_cfg = default_loss_config(buf, loss_cfg)
    loss_cfg.validate()
    t0 = time.perf_counter()
    head = _init_head(buf, cfg, center)
    opt = OptState(base_lr=cfg.base_lr, total_steps=cfg.n_iter, warmup_fraction=cfg.warmup_fraction)
    stage = _Stage(buf, mode, head, opt, loss_cfg, filter_cfg, cfg.batch_size,
                   np.random.default_rng([cfg.seed, 0x7A1]))
    stage.run(cfg.n_iter)
    if buf.ledger is not None:
        buf.ledger.freeze()
    return TrainResult(head, buf.ledger, stage.log, opt, time.perf_counter() - t0)


def train_c2f(rendered: SampleBuffer, query: SampleBuffer, c2f: C2fConfig | None = None,
              cfg: TrainConfig | None = None, filter_cfg: FilterConfig | None = None,
              loss_cfg: LossConfig | None = None, coarse_only: bool = False) -> TrainResult:
    """Coarse stage on renders alone with a loose gate, then a fine stage mixing in queries.

    The fine stage restarts the optimiser at a reduced learning rate, ramps
    the query share of each batch from one half to all, and stops gating
    for the final stretch of iterations.
    """
    c2f = c2f or C2fConfig()
    cfg = cfg or TrainConfig()
    cfg.validate()
    base_filter = filter_cfg or FilterConfig()
    c2f.validate(base_filter.tau_r)
    if len(rendered) == 0 or len(query) == 0:
        raise EmptyBuffer("coarse-to-fine training needs rendered and query pixels")
    t0 = time.perf_counter()
    loss_cfg = loss_cfg or LossConfig(pseudo_depth_m=mean_query_depth(query))
    loss_cfg.validate()

    rend = shuffle_buffer(rendered.take(np.flatnonzero(
        subsample(len(rendered), base_filter.bernoulli_p, cfg.seed))), cfg.seed)
    rend.ledger = PoiLedger(rend.frame_ids, rend.pixels)
    rend.ledger_row = np.arange(len(rend))
    coarse_filter = FilterConfig(**{**vars(base_filter), "n_iter": c2f.coarse_iters})
    head = _init_head(query, cfg, None)
    opt = OptState(base_lr=cfg.base_lr, total_steps=c2f.coarse_iters,
                   warmup_fraction=cfg.warmup_fraction)
    coarse = _Stage(rend, TrainMode.POI, head, opt, loss_cfg, coarse_filter, cfg.batch_size,
                    np.random.default_rng([cfg.seed, 0xC0A]), tau_r=c2f.coarse_tau_r)
    coarse.run(c2f.coarse_iters)
    rend.ledger.freeze()
    if coarse_only:
        return TrainResult(head, rend.ledger, coarse.log, opt, time.perf_counter() - t0)

    survivors = rend.take(np.flatnonzero(rend.ledger.active))
    survivors.ledger = PoiLedger(survivors.frame_ids, survivors.pixels)
    survivors.ledger_row = np.arange(len(survivors))
    q = query.take(np.arange(len(query)))
    q.ledger_row = np.full(len(q), -1, dtype=np.int64)
    fine_buf = concat_buffers(q, survivors)
    fine_buf.ledger = survivors.ledger
    freeze = 1.0 - c2f.final_unfiltered_fraction
    fine_filter = FilterConfig(**{**vars(base_filter), "n_iter": c2f.fine_iters, "freeze_fraction": freeze,
                                  "gate_start_fraction": min(base_filter.gate_start_fraction, freeze)})
    fine_opt = OptState(base_lr=cfg.base_lr * c2f.fine_lr_scale, total_steps=c2f.fine_iters,
                        warmup_fraction=cfg.warmup_fraction)
    fine = _Stage(fine_buf, TrainMode.POI, head, fine_opt, loss_cfg, fine_filter, cfg.batch_size,
                  np.random.default_rng([cfg.seed, 0xF1E]), query_share=(0.5, 1.0))
    fine.run(c2f.fine_iters, iter_offset=c2f.coarse_iters)
    fine_buf.ledger.freeze()
    return TrainResult(head, fine_buf.ledger, coarse.log + fine.log, fine_opt,
                       time.perf_counter() - t0)


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        return float("nan")
    return float(v[(len(v) - 1) // 2])


@dataclass
class FrameResult:
    frame_id: int
    pose: Pose | None
    t_err: float
    r_err: float
    inlier_ratio: float
    model: int = 0
    failure: str | None = None


@dataclass
class EvalSummary:
    frames: list[FrameResult]
    median_t: float
    median_r: float
    acc_5cm_5deg: float
    acc_10cm_5deg: float
    n_failed: int

    def as_dict(self) -> dict:
        return {"median_t_m": self.median_t, "median_r_deg": self.median_r,
                "acc_5cm_5deg": self.acc_5cm_5deg, "acc_10cm_5deg": self.acc_10cm_5deg,
                "n_frames": len(self.frames), "n_failed": self.n_failed}


def summarize(frames: list[FrameResult]) -> EvalSummary:
    ok = [f for f in frames if f.failure is None]
    n = len(frames)
    acc = lambda t, r: sum(1 for f in ok if f.t_err < t and f.r_err < r) / n
    return EvalSummary(frames, lower_median([f.t_err for f in ok]), lower_median([f.r_err for f in ok]),
                       acc(0.05, 5.0), acc(0.10, 5.0), n - len(ok))


def evaluate(heads, test_frames: list[Frame], ransac_cfg: RansacConfig | None = None) -> EvalSummary:
    """Localise every test frame; with several heads the best-consensus model wins.

    ``heads`` is one head, a list of heads, or any callable mapping a frame
    to predicted scene coordinates.
    """
    if not test_frames:
        raise EmptyQuerySet("no test frames")
    ransac_cfg = ransac_cfg or RansacConfig()
    heads = heads if isinstance(heads, (list, tuple)) else [heads]
    out = []
    for frame in test_frames:
        results = []
        err = None
        for head in heads:
            coords = head(frame) if not isinstance(head, MlpHead) else \
                head(frame.features.astype(head.dtype)).astype(np.float64)
            try:
                results.append(ransac_pnp(frame.pixels, coords, frame.intrinsics, ransac_cfg))
            except PoiLocError as exc:
                results.append((None, -1.0))
                err = type(exc).__name__
        best = select_model([r[1] for r in results])
        pose, ratio = results[best]
        if pose is None:
            out.append(FrameResult(frame.frame_id, None, np.inf, np.inf, 0.0, best, err))
            continue
        out.append(FrameResult(frame.frame_id, pose, translation_error_m(pose, frame.pose),
                               rotation_error_deg(pose, frame.pose), ratio, best))
    return summarize(out)


def oracle_head(frame: Frame) -> np.ndarray:
    return frame.gt_coords


@dataclass
class FilterQuality:
    precision: float
    recall: float
    precision_defined: bool
    tp: int
    fp: int
    fn: int


def filter_quality(ledger: PoiLedger, oracle: dict) -> FilterQuality:
    """Score Discarded as a corruption prediction against ``{key: corrupted}``."""
    keys = ledger.keys()
    missing = [k for k in keys if k not in oracle]
    if missing:
        raise KeyMismatch(f"{len(missing)} ledger keys missing from oracle, e.g. {missing[0]}")
    truth = np.array([bool(oracle[k]) for k in keys])
    pred = ledger.status == Status.DISCARDED
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    defined = tp + fp > 0
    precision = tp / (tp + fp) if defined else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return FilterQuality(precision, recall, defined, tp, fp, fn)


def oracle_from_frames(frames: list[Frame]) -> dict:
    out = {}
    for f in frames:
        for key, c in zip(pixel_keys(np.full(len(f), f.frame_id), f.pixels), f.corrupted):
            out[key] = bool(c)
    return out


def split_clusters(poses: list[Pose], k: int = 2, seed: int = 0) -> np.ndarray:
    """k-means labels over camera centres."""
    from scipy.cluster.vq import kmeans2
    centers = np.array([p.center for p in poses])
    _, labels = kmeans2(centers, k, minit="++", seed=np.random.default_rng([seed, 0xC1]))
    return labels


def train_clusters(query_frames: list[Frame], rendered_frames: list[Frame], mode: TrainMode | str,
                   cfg: TrainConfig | None = None, filter_cfg: FilterConfig | None = None,
                   k: int = 2) -> list[TrainResult]:
    """One head per camera cluster; renders go to the cluster of their nearest query camera."""
    cfg = cfg or TrainConfig()
    labels = split_clusters([f.pose for f in query_frames], k, cfg.seed)
    q_centers = np.array([f.pose.center for f in query_frames])
    out = []
    for c in range(k):
        q = [f for f, l in zip(query_frames, labels) if l == c]
        if not q:
            continue
        r = [f for f in rendered_frames
             if labels[int(np.argmin(np.linalg.norm(q_centers - f.pose.center, axis=1)))] == c]
        out.append(train(assemble(mode, q, r, filter_cfg, cfg.seed), mode, cfg, filter_cfg))
    return out
