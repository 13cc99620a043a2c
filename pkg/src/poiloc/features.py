"""Deterministic per-pixel descriptors.

Layout of a feature vector of length ``feature_dim``::

    [ fourier(ray, appearance) : 2*fourier_bands | hash(appearance) : rest | exposure : 1 ]

The first two blocks are jointly scaled to unit norm. The encoder never
sees the camera position, only the world-frame viewing direction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .geometry import Intrinsics, Pose, pixel_rays

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_uniform(keys: np.ndarray, seed: int, count: int) -> np.ndarray:
    """``count`` uniforms in (0, 1) per key, a pure function of (seed, key)."""
    keys = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    base = splitmix64(keys ^ splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    with np.errstate(over="ignore"):
        lanes = base[:, None] + np.arange(1, count + 1, dtype=np.uint64)[None, :] * np.uint64(0xD1B54A32D192ED03)
    bits = splitmix64(lanes) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) / float(1 << 53)


def hash_normal(keys: np.ndarray, seed: int, count: int) -> np.ndarray:
    u = hash_uniform(keys, seed, 2 * count)
    r = np.sqrt(-2.0 * np.log(u[:, :count]))
    return r * np.cos(2.0 * np.pi * u[:, count:])


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 64
    fourier_bands: int = 8
    encoder_seed: int = 0
    # angular frequency scale of the ray Fourier features, rad^-1
    ray_bandwidth: float = 1.0
    # relative weight of the Fourier block before joint normalisation
    fourier_weight: float = 0.05

    def validate(self) -> None:
        if self.feature_dim < 8 or self.feature_dim % 2:
            raise InvalidConfig("encoder.feature_dim must be even and >= 8")
        if self.fourier_bands < 1 or 2 * self.fourier_bands > self.feature_dim - 3:
            raise InvalidConfig("encoder.fourier_bands leaves no room for the hash block")

    @property
    def exposure_channel(self) -> int:
        return self.feature_dim - 1


class FeatureEncoder:
    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        self.config.validate()
        c = self.config
        rng = np.random.default_rng([c.encoder_seed, 0xFEA7])
        self._omega = rng.normal(0.0, c.ray_bandwidth, size=(c.fourier_bands, 3))
        self._hash_dim = c.feature_dim - 2 * c.fourier_bands - 1

    def encode_rays(self, ray_dirs: np.ndarray, appearance: np.ndarray,
                    exposure: float | np.ndarray = 0.0) -> np.ndarray:
        """Encode unit world-frame ray directions (N, 3) with appearance ids (N,)."""
        c = self.config
        ray_dirs = np.atleast_2d(ray_dirs)
        appearance = np.atleast_1d(appearance)
        phase = 2.0 * np.pi * hash_uniform(appearance, c.encoder_seed + 1, c.fourier_bands)
        arg = ray_dirs @ self._omega.T + phase
        fourier = np.concatenate([np.cos(arg), np.sin(arg)], axis=1) / np.sqrt(c.fourier_bands)
        hashed = hash_normal(appearance, c.encoder_seed + 2, self._hash_dim)
        hashed /= np.linalg.norm(hashed, axis=1, keepdims=True)
        body = np.concatenate([c.fourier_weight * fourier, hashed], axis=1)
        body /= np.linalg.norm(body, axis=1, keepdims=True)
        expo = np.broadcast_to(np.asarray(exposure, dtype=np.float64), (len(body),))
        return np.concatenate([body, expo[:, None]], axis=1)

    def encode(self, pixels: np.ndarray, appearance: np.ndarray, pose: Pose, k: Intrinsics,
               exposure: float = 0.0) -> np.ndarray:
        return self.encode_rays(world_rays(pixels, pose, k), appearance, exposure)

    def encode_frame(self, frame) -> np.ndarray:
        frame.features = self.encode(frame.pixels, frame.appearance, frame.pose,
                                     frame.intrinsics, frame.exposure)
        return frame.features

    def encode_sample(self, sample, pose: Pose, k: Intrinsics, exposure: float = 0.0) -> np.ndarray:
        return self.encode(np.asarray(sample.pixel)[None], np.array([sample.appearance]),
                           pose, k, exposure)[0]


def world_rays(pixels: np.ndarray, pose: Pose, k: Intrinsics) -> np.ndarray:
    d = pixel_rays(pixels, k) @ pose.R.T
    return d / np.linalg.norm(d, axis=1, keepdims=True)
