"""Experiment configuration: one JSON document, one section per module.

Unknown keys are rejected. ``--set section.key=value`` overrides are parsed
as JSON where possible and as plain strings otherwise.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import InvalidConfig
from .features import EncoderConfig
from .pipeline import C2fConfig, TrainConfig
from .pnp import RansacConfig
from .poi import FilterConfig
from .regressor import LossConfig
from .render import CorruptionField, NovelPoseBudget
from .scene import SceneConfig, TrajectoryConfig


@dataclass
class SceneSection:
    point_count: int = 1000
    bounds_min: tuple = (-2.0, -2.0, 0.0)
    bounds_max: tuple = (2.0, 2.0, 3.0)
    plane_fraction: float = 0.8
    n_patches: int = 10
    seed: int = 7
    n_train_frames: int = 16
    n_test_frames: int = 20
    pixels_per_frame: int = 400
    trajectory: str = "orbit"
    radius: float = 4.0
    height: float = 1.8
    # test cameras sit between the training ones
    test_angle_offset: float = 0.13

    def scene_config(self) -> SceneConfig:
        return SceneConfig(self.point_count, tuple(self.bounds_min), tuple(self.bounds_max),
                           self.plane_fraction, self.n_patches, self.seed)

    def trajectory_config(self, seed: int, test: bool = False) -> TrajectoryConfig:
        return TrajectoryConfig(radius=self.radius, height=self.height,
                                angle_offset=self.test_angle_offset if test else 0.0,
                                seed=seed + (100 if test else 0))

    def validate(self) -> None:
        self.scene_config().validate()
        if min(self.n_train_frames, self.n_test_frames, self.pixels_per_frame) < 1:
            raise InvalidConfig("scene frame and pixel counts must be >= 1")


@dataclass
class RenderSection:
    corruption_fraction: float = 0.3
    blob_scale: float = 48.0
    coord_noise_sigma: float = 0.25
    feature_noise_sigma: float = 0.01
    exposure_shift: float = 0.2
    candidate_count: int = 64
    select_count: int = 16
    jitter_rot_deg: float = 4.0
    jitter_trans_m: float = 0.25

    def field(self, seed: int) -> CorruptionField:
        return CorruptionField(seed, self.corruption_fraction, self.blob_scale,
                               self.coord_noise_sigma, self.feature_noise_sigma, self.exposure_shift)

    def budget(self, seed: int) -> NovelPoseBudget:
        return NovelPoseBudget(self.candidate_count, self.select_count, self.jitter_rot_deg,
                               self.jitter_trans_m, seed)

    def validate(self) -> None:
        self.field(0).validate()
        self.budget(0).validate()


@dataclass
class RegressorSection:
    hidden: tuple = (128, 128, 128)
    base_lr: float = 1e-2
    warmup_fraction: float = 0.1
    batch_size: int = 512
    reproj_clamp_px: float = 100.0
    # null means the mean depth of the query samples
    pseudo_depth_m: float | None = None
    pseudo_switch_threshold_px: float = 50.0
    depth_min_m: float = 0.1
    depth_max_m: float = 20.0
    huber_delta_px: float = 1.0
    # null converts metres to pixels at the pseudo depth
    pseudo_scale: float | None = None

    def loss_config(self, mean_depth: float) -> LossConfig:
        return LossConfig(self.reproj_clamp_px,
                          mean_depth if self.pseudo_depth_m is None else self.pseudo_depth_m,
                          self.pseudo_switch_threshold_px, self.depth_min_m, self.depth_max_m,
                          self.huber_delta_px, self.pseudo_scale)

    def validate(self) -> None:
        if any(int(w) < 1 for w in self.hidden):
            raise InvalidConfig("regressor.hidden widths must be >= 1")
        self.loss_config(0.5 * (self.depth_min_m + self.depth_max_m)).validate()


@dataclass
class PipelineSection:
    n_iter: int = 6000
    coarse_tau_r: float = 15.0
    coarse_iters: int = 3000
    fine_iters: int = 6000
    fine_lr_scale: float = 0.3
    final_unfiltered_fraction: float = 0.1
    # number of query frames kept for sparse-input runs; null keeps all
    sparse_frames: int | None = None
    clusters: int = 1

    def c2f(self) -> C2fConfig:
        return C2fConfig(self.coarse_tau_r, self.coarse_iters, self.fine_iters,
                         self.fine_lr_scale, self.final_unfiltered_fraction)

    def validate(self) -> None:
        if self.n_iter < 1 or self.clusters < 1:
            raise InvalidConfig("pipeline.n_iter and pipeline.clusters must be >= 1")


@dataclass
class FilterSection:
    tau_g: float = 0.0005
    tau_r: float = 5.0
    bernoulli_p: float = 0.5
    omega_max: float = 1.0
    omega_min: float = 0.01
    freeze_fraction: float = 0.9
    gate_start_fraction: float = 0.85

    def config(self, n_iter: int) -> FilterConfig:
        return FilterConfig(n_iter=n_iter, **dataclasses.asdict(self))

    def validate(self) -> None:
        self.config(1).validate()


@dataclass
class RansacSection:
    threshold_px: float = 10.0
    max_hypotheses: int = 256
    min_set: int = 4
    confidence: float = 0.999
    refine_iters: int = 50

    def config(self, seed: int) -> RansacConfig:
        return RansacConfig(self.threshold_px, self.max_hypotheses, self.min_set,
                            self.confidence, self.refine_iters, seed)

    def validate(self) -> None:
        self.config(0).validate()


@dataclass
class ExperimentConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    render: RenderSection = field(default_factory=RenderSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    regressor: RegressorSection = field(default_factory=RegressorSection)
    filter: FilterSection = field(default_factory=FilterSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    seed: int = 0
    out: str = "run"

    def validate(self) -> "ExperimentConfig":
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if dataclasses.is_dataclass(section):
                section.validate()
        return self

    def train_config(self) -> TrainConfig:
        r = self.regressor
        return TrainConfig(self.pipeline.n_iter, r.batch_size, r.base_lr, r.warmup_fraction,
                           tuple(r.hidden), self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")


def _coerce(value: Any, current: Any, name: str):
    """Match tuple/float fields so configs compare and serialise consistently."""
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{name} must be a list")
        return tuple(value)
    if isinstance(current, bool) or isinstance(value, bool):
        if not isinstance(value, bool) or not isinstance(current, bool):
            raise InvalidConfig(f"{name} has the wrong type")
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if current is not None and value is not None and not isinstance(value, type(current)):
        raise InvalidConfig(f"{name} expects {type(current).__name__}, got {type(value).__name__}")
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise InvalidConfig(f"section {prefix.rstrip('.') or '<root>'} must be an object")
    obj = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        name = prefix + key
        if key not in known:
            raise InvalidConfig(f"unknown config key {name}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, name + ".")
        else:
            value = _coerce(value, current, name)
        if dataclasses.is_dataclass(obj) and getattr(type(obj), "__dataclass_params__").frozen:
            obj = dataclasses.replace(obj, **{key: value})
        else:
            setattr(obj, key, value)
    return obj


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    data = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form section.key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = path.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise InvalidConfig(f"unknown config section {path}")
            node = node[p]
        if parts[-1] not in node:
            raise InvalidConfig(f"unknown config key {path}")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    cfg = apply_overrides(ExperimentConfig.from_dict(data), overrides or [])
    return cfg.validate()
