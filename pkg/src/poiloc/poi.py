"""Pixel-of-interest filtering of rendered training pixels.

Rendered pixels are thinned once by a Bernoulli draw, then every time one
lands in a batch its gradient statistic and reprojection error go through a
two-threshold gate. Failing the gate removes the pixel for good. Survivors
are weighted by a linearly decaying schedule; query pixels always keep
weight one. Near the end of training the ledger freezes.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DuplicateKey, InvalidConfig, IterOutOfRange, NonFiniteInput

log = logging.getLogger(__name__)


class Status(enum.IntEnum):
    ACTIVE = 0
    DISCARDED = 1


class GateResult(enum.IntEnum):
    RETAIN = 0
    DISCARD = 1


@dataclass
class FilterConfig:
    tau_g: float = 0.0005
    tau_r: float = 5.0
    bernoulli_p: float = 0.5
    omega_max: float = 1.0
    omega_min: float = 0.01
    n_iter: int = 6000
    freeze_fraction: float = 0.9
    # the gate stays open until this share of n_iter has elapsed
    gate_start_fraction: float = 0.85

    def validate(self) -> None:
        if self.tau_g <= 0 or self.tau_r <= 0:
            raise InvalidConfig("filter.tau_g and filter.tau_r must be > 0")
        if not 0.0 < self.bernoulli_p <= 1.0:
            raise InvalidConfig("filter.bernoulli_p must lie in (0, 1]")
        if self.omega_min > self.omega_max:
            raise InvalidConfig("filter.omega_min must not exceed filter.omega_max")
        if not 0.0 < self.freeze_fraction <= 1.0:
            raise InvalidConfig("filter.freeze_fraction must lie in (0, 1]")
        if not 0.0 <= self.gate_start_fraction <= self.freeze_fraction:
            raise InvalidConfig("filter.gate_start_fraction must lie in [0, freeze_fraction]")
        if self.n_iter < 1:
            raise InvalidConfig("filter.n_iter must be >= 1")


def subsample(n: int, p: float, seed: int) -> np.ndarray:
    """Boolean keep-mask: each of ``n`` samples kept independently with probability ``p``."""
    if not 0.0 < p <= 1.0:
        raise InvalidConfig("bernoulli p must lie in (0, 1]")
    if p == 1.0:
        return np.ones(n, dtype=bool)
    return np.random.default_rng([seed, 0xB3]).random(n) < p


def gate_array(grad_stat: np.ndarray, reproj: np.ndarray, tau_g: float, tau_r: float) -> np.ndarray:
    """Vectorised gate; True means retain. Infinite reprojection errors fail."""
    grad_stat = np.asarray(grad_stat, dtype=np.float64)
    reproj = np.asarray(reproj, dtype=np.float64)
    if np.any(~np.isfinite(grad_stat)) or np.any(np.isnan(reproj)):
        raise NonFiniteInput("gate inputs must be finite")
    return (grad_stat < tau_g) & (reproj < tau_r)


def gate(grad_norm: float, reproj_err: float, cfg: FilterConfig) -> GateResult:
    if not (np.isfinite(grad_norm) and np.isfinite(reproj_err)):
        raise NonFiniteInput("gate inputs must be finite")
    if grad_norm < 0 or reproj_err < 0:
        raise NonFiniteInput("gate inputs must be non-negative")
    keep = grad_norm < cfg.tau_g and reproj_err < cfg.tau_r
    return GateResult.RETAIN if keep else GateResult.DISCARD


def poi_weight(iteration: int | float, cfg: FilterConfig) -> float:
    if not 0 <= iteration <= cfg.n_iter:
        raise IterOutOfRange(f"iteration {iteration} outside [0, {cfg.n_iter}]")
    s = iteration / cfg.n_iter
    # interpolation form keeps both endpoints exact
    return (1.0 - s) * cfg.omega_max + s * cfg.omega_min


def pixel_keys(frame_ids: np.ndarray, pixels: np.ndarray) -> list[tuple]:
    """Hashable (frame_id, u, v) keys at float32 precision, as stored on disk."""
    px = np.asarray(pixels, dtype=np.float32)
    return list(zip(np.asarray(frame_ids, dtype=np.int64).tolist(),
                    px[:, 0].tolist(), px[:, 1].tolist()))


@dataclass
class GateInputs:
    rows: np.ndarray        # ledger rows of the rendered pixels in the batch
    grad_stat: np.ndarray
    reproj: np.ndarray      # inf while a pixel sits on the pseudo-depth branch


class PoiLedger:
    """Retain/discard state of every rendered pixel that survived subsampling."""

    def __init__(self, frame_ids: np.ndarray, pixels: np.ndarray):
        self.frame_ids = np.asarray(frame_ids, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=np.float32)
        keys = pixel_keys(self.frame_ids, self.pixels)
        self._row = {}
        for i, key in enumerate(keys):
            if key in self._row:
                raise DuplicateKey(f"duplicate ledger key {key}")
            self._row[key] = i
        self.status = np.full(len(keys), Status.ACTIVE, dtype=np.int8)
        # pixels must reach the reprojection branch once before they can be dropped
        self.reached_reproj = np.zeros(len(keys), dtype=bool)
        self.discarded_at = np.full(len(keys), -1, dtype=np.int64)
        self.frozen = False
        self.iteration = 0

    def __len__(self):
        return len(self.status)

    def row(self, frame_id: int, u: float, v: float) -> int:
        return self._row[(int(frame_id), float(np.float32(u)), float(np.float32(v)))]

    def keys(self) -> list[tuple]:
        return pixel_keys(self.frame_ids, self.pixels)

    @property
    def active(self) -> np.ndarray:
        return self.status == Status.ACTIVE

    def active_count(self) -> int:
        return int(np.count_nonzero(self.active))

    def apply_iteration(self, inputs: GateInputs, iteration: int, cfg: FilterConfig,
                        gate_enabled: bool = True, tau_r: float | None = None) -> np.ndarray:
        """Gate one batch of rendered pixels; return their loss weights.

        Weights are the schedule value for retained pixels and zero for
        pixels discarded by this very call.
        """
        rows = np.asarray(inputs.rows, dtype=np.int64)
        self.iteration = int(iteration)
        omega = poi_weight(min(iteration, cfg.n_iter), cfg)
        weights = np.full(len(rows), omega)
        if not self.frozen and iteration >= cfg.freeze_fraction * cfg.n_iter:
            self.frozen = True
            log.debug("ledger frozen at iteration %d with %d active", iteration, self.active_count())
        if self.frozen or len(rows) == 0:
            return weights
        on_reproj = np.isfinite(inputs.reproj)
        seen = self.reached_reproj[rows].copy()
        # branch visits count even while the gate is still closed
        self.reached_reproj[rows[on_reproj]] = True
        if not gate_enabled:
            return weights
        keep = gate_array(inputs.grad_stat, np.nan_to_num(inputs.reproj, posinf=np.inf),
                          cfg.tau_g, cfg.tau_r if tau_r is None else tau_r)
        drop = ~keep & (on_reproj | seen)
        hit = rows[drop]
        self.status[hit] = Status.DISCARDED
        self.discarded_at[hit] = iteration
        weights[drop] = 0.0
        return weights

    def freeze(self) -> None:
        self.frozen = True

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for f, (u, v), s in zip(self.frame_ids, self.pixels, self.status):
                fh.write(f"{f} {u:.9g} {v:.9g} {Status(s).name.lower()}\n")

    @staticmethod
    def read_dump(path) -> dict:
        out = {}
        with open(path) as fh:
            for line in fh:
                f, u, v, s = line.split()
                key = (int(f), float(np.float32(u)), float(np.float32(v)))
                if key in out:
                    raise DuplicateKey(f"duplicate ledger key {key}")
                out[key] = Status[s.upper()]
        return out


def realign(frame_ids: np.ndarray, pixels: np.ndarray, *payload: np.ndarray) -> dict:
    """Group a shuffled batch back into frames.

    Returns ``{frame_id: (pixels, *payload)}`` with each frame's rows sorted
    by pixel coordinate, so the result is independent of the shuffle.
    """
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    pixels = np.asarray(pixels)
    keys = pixel_keys(frame_ids, pixels)
    if len(set(keys)) != len(keys):
        raise DuplicateKey("batch contains a repeated (frame_id, pixel) key")
    out = {}
    for f in np.unique(frame_ids):
        sel = np.flatnonzero(frame_ids == f)
        order = sel[np.lexsort((pixels[sel, 1], pixels[sel, 0]))]
        out[int(f)] = tuple([pixels[order]] + [np.asarray(p)[order] for p in payload])
    return out
