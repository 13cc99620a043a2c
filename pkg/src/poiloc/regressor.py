"""Scene-coordinate regression head, pixel loss, backprop and optimiser.

The head is a small leaky-ReLU MLP written directly in numpy. Training is
float32 by default; the float64 path is used by gradient checks.
"""
from __future__ import annotations

import enum
import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, SchemaMismatch
from .geometry import Intrinsics, Pose, Z_MIN

LEAKY_SLOPE = 0.01
CHECKPOINT_MAGIC = b"POIHEAD\x00"
CHECKPOINT_VERSION = 1


class Branch(enum.IntEnum):
    REPROJ = 0
    PSEUDO_DEPTH = 1


class MlpHead:
    """Affine + leaky-ReLU stack; the last layer is linear."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 slope: float = LEAKY_SLOPE):
        if len(weights) != len(biases) or not weights:
            raise DimensionMismatch("weights and biases must pair up")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.shape[1] != b.shape[0]:
                raise DimensionMismatch(f"layer {i}: weight {W.shape} vs bias {b.shape}")
            if i and weights[i - 1].shape[1] != W.shape[0]:
                raise DimensionMismatch(f"layer {i} input width does not match layer {i - 1}")
        if weights[-1].shape[1] != 3:
            raise DimensionMismatch("head output must be 3-dimensional")
        self.weights = weights
        self.biases = biases
        self.slope = slope

    @classmethod
    def init(cls, widths: list[int], seed: int = 0, output_bias=None,
             dtype=np.float32, output_scale: float = 0.01) -> "MlpHead":
        """He-initialised hidden layers, a near-zero output layer biased to ``output_bias``."""
        rng = np.random.default_rng([seed, 0x4EAD])
        weights, biases = [], []
        n = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            std = np.sqrt(2.0 / a) * (output_scale if i == n - 1 else 1.0)
            weights.append((rng.normal(0.0, std, size=(a, b))).astype(dtype))
            biases.append(np.zeros(b, dtype=dtype))
        if output_bias is not None:
            biases[-1][:] = np.asarray(output_bias, dtype=dtype)
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def copy(self) -> "MlpHead":
        return MlpHead([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.slope)

    def astype(self, dtype) -> "MlpHead":
        return MlpHead([W.astype(dtype) for W in self.weights],
                       [b.astype(dtype) for b in self.biases], self.slope)

    def forward_cache(self, X: np.ndarray):
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 2 or X.shape[1] != self.weights[0].shape[0]:
            raise DimensionMismatch(
                f"feature width {X.shape[-1]} != head input width {self.weights[0].shape[0]}")
        acts, pres = [X], []
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i < last:
                pres.append(z)
                h = np.where(z > 0, z, self.slope * z)
                acts.append(h)
            else:
                h = z
        return h, (acts, pres)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward_cache(X)[0]

    def backward(self, cache, d_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given dL/d(output); ordered like :meth:`params`."""
        acts, pres = cache
        g = np.asarray(d_out, dtype=self.dtype)
        grads = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = g @ self.weights[i].T
                g = g * np.where(pres[i - 1] > 0, 1.0, self.slope).astype(g.dtype)
        return grads


def forward(head: MlpHead, feature: np.ndarray) -> np.ndarray:
    """Predict a scene coordinate for one feature vector or a batch."""
    feature = np.asarray(feature)
    if feature.ndim == 1:
        return head(feature[None])[0]
    return head(feature)


@dataclass
class LossConfig:
    reproj_clamp_px: float = 100.0
    pseudo_depth_m: float = 4.0
    pseudo_switch_threshold_px: float = 50.0
    depth_min_m: float = 0.1
    depth_max_m: float = 20.0
    # quadratic core of the reprojection loss, pixels
    huber_delta_px: float = 1.0
    # pseudo-depth loss multiplier inside the training objective;
    # None converts metres to pixels at the pseudo depth
    pseudo_scale: float | None = None

    def validate(self) -> None:
        if min(self.reproj_clamp_px, self.pseudo_switch_threshold_px, self.huber_delta_px) <= 0:
            raise InvalidConfig("loss thresholds must be > 0")
        if not self.depth_min_m < self.pseudo_depth_m < self.depth_max_m:
            raise InvalidConfig("loss: need depth_min_m < pseudo_depth_m < depth_max_m")


@dataclass
class Cameras:
    """Camera-from-world rotations and translations for a table of frames."""

    R_cw: np.ndarray    # (F, 3, 3)
    t_cw: np.ndarray    # (F, 3)
    k: Intrinsics

    @classmethod
    def from_poses(cls, poses: list[Pose], k: Intrinsics) -> "Cameras":
        R = np.stack([p.R.T for p in poses]) if poses else np.zeros((0, 3, 3))
        t = -np.einsum("fij,fj->fi", R, np.stack([p.translation for p in poses])) if poses else np.zeros((0, 3))
        return cls(R, t, k)


@dataclass
class LossTerms:
    loss: np.ndarray        # (n,) per-pixel loss (pixels or metres by branch)
    branch: np.ndarray      # (n,) Branch values
    reproj: np.ndarray      # (n,) reprojection error, inf on the pseudo-depth branch
    grad: np.ndarray        # (n, 3) d loss / d prediction
    scale: np.ndarray       # (n,) objective multiplier per pixel


def pixel_losses(pred: np.ndarray, pixels: np.ndarray, frame_idx: np.ndarray,
                 cams: Cameras, cfg: LossConfig) -> LossTerms:
    """Vectorised two-branch pixel loss.

    A prediction that lies inside the valid depth range and reprojects within
    ``pseudo_switch_threshold_px`` is supervised by a Huber-smoothed, clamped
    reprojection error. Anything else is pulled towards the point at
    ``pseudo_depth_m`` on the pixel's ray.
    """
    pred = np.asarray(pred, dtype=np.float64)
    k = cams.k
    R = cams.R_cw[frame_idx]
    xc = np.einsum("nij,nj->ni", R, pred) + cams.t_cw[frame_idx]
    z = xc[:, 2]
    front = z > max(Z_MIN, cfg.depth_min_m)
    zs = np.where(front, z, 1.0)
    uv = np.stack([k.fx * xc[:, 0] / zs + k.cx, k.fy * xc[:, 1] / zs + k.cy], axis=1)
    e = uv - pixels
    r = np.linalg.norm(e, axis=1)
    valid = front & (z <= cfg.depth_max_m) & (r < cfg.pseudo_switch_threshold_px)

    n = len(pred)
    loss = np.empty(n)
    grad = np.zeros((n, 3))

    d = cfg.huber_delta_px
    hub = np.where(r <= d, 0.5 * r * r / d, r - 0.5 * d)
    clamped = hub >= cfg.reproj_clamp_px
    loss[valid] = np.minimum(hub, cfg.reproj_clamp_px)[valid]
    # d hub / d e = e / max(r, d)
    de = e / np.maximum(r, d)[:, None]
    de[clamped] = 0.0
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = k.fx / zs
    J[:, 0, 2] = -k.fx * xc[:, 0] / zs**2
    J[:, 1, 1] = k.fy / zs
    J[:, 1, 2] = -k.fy * xc[:, 1] / zs**2
    g_cam = np.einsum("nj,nji->ni", de, J)
    g_world = np.einsum("nj,nji->ni", g_cam, R)
    grad[valid] = g_world[valid]

    inv = ~valid
    if inv.any():
        rays = np.stack([(pixels[inv, 0] - k.cx) / k.fx, (pixels[inv, 1] - k.cy) / k.fy,
                         np.ones(inv.sum())], axis=1) * cfg.pseudo_depth_m
        # camera -> world: R_cw^T (x - t_cw)
        target = np.einsum("nji,nj->ni", R[inv], rays - cams.t_cw[frame_idx[inv]])
        diff = pred[inv] - target
        dist = np.linalg.norm(diff, axis=1)
        loss[inv] = dist
        grad[inv] = diff / np.where(dist > 0, dist, 1.0)[:, None]

    reproj = np.where(valid, r, np.inf)
    branch = np.where(valid, Branch.REPROJ, Branch.PSEUDO_DEPTH).astype(np.int8)
    pseudo_scale = cfg.pseudo_scale
    if pseudo_scale is None:
        pseudo_scale = k.mean_focal / cfg.pseudo_depth_m
    scale = np.where(valid, 1.0, pseudo_scale)
    return LossTerms(loss=loss, branch=branch, reproj=reproj, grad=grad, scale=scale)


def pixel_loss(pred, sample, pose: Pose, k: Intrinsics, cfg: LossConfig) -> tuple[float, Branch]:
    """Single-pixel wrapper around :func:`pixel_losses`."""
    cams = Cameras.from_poses([pose], k)
    terms = pixel_losses(np.asarray(pred, dtype=np.float64)[None],
                         np.asarray(sample.pixel, dtype=np.float64)[None],
                         np.zeros(1, dtype=np.int64), cams, cfg)
    return float(terms.loss[0]), Branch(int(terms.branch[0]))


@dataclass
class BackwardResult:
    loss: float                 # weighted mean loss of the batch
    grads: list[np.ndarray]
    grad_norms: np.ndarray      # per-pixel |d loss / d prediction|
    terms: LossTerms
    pred: np.ndarray


def gate_statistic(grad_norms: np.ndarray, weights: np.ndarray, batch_size: int,
                   k: Intrinsics) -> np.ndarray:
    """Per-pixel gradient magnitude fed to the filter gate.

    The pixel's share of the gradient of the weighted batch-mean loss at the
    head output, with the loss measured in normalised image units (pixels
    divided by the mean focal length) so it does not depend on resolution.
    """
    return np.asarray(weights) * np.asarray(grad_norms) / (batch_size * k.mean_focal)


def backward(head: MlpHead, features: np.ndarray, pixels: np.ndarray, frame_idx: np.ndarray,
             cams: Cameras, cfg: LossConfig, weights: np.ndarray | None = None) -> BackwardResult:
    """Gradients of ``mean(weights * scale * pixel_loss)`` plus per-pixel gradient norms.

    ``scale`` is one on the reprojection branch and ``cfg.pseudo_scale`` on
    the pseudo-depth branch.
    """
    n = len(features)
    if n == 0:
        raise InvalidConfig("backward needs a non-empty batch")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    pred, cache = head.forward_cache(features)
    terms = pixel_losses(pred, pixels, frame_idx, cams, cfg)
    return backward_from_terms(head, cache, terms, weights, pred)


def backward_from_terms(head: MlpHead, cache, terms: LossTerms, weights: np.ndarray,
                        pred: np.ndarray) -> BackwardResult:
    """Backward pass once the pixel losses (and hence the weights) are known."""
    n = len(weights)
    w = weights * terms.scale
    d_out = (w[:, None] * terms.grad) / n
    grads = head.backward(cache, d_out)
    return BackwardResult(loss=float(np.mean(w * terms.loss)), grads=grads,
                          grad_norms=np.linalg.norm(terms.grad, axis=1), terms=terms,
                          pred=np.asarray(pred, dtype=np.float64))


def one_cycle_lr(step: int, total: int, base_lr: float, warmup_fraction: float = 0.1,
                 start_div: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warm-up to ``base_lr`` then cosine annealing to ``base_lr / final_div``."""
    total = max(int(total), 1)
    warm = max(int(round(warmup_fraction * total)), 1)
    if step < warm:
        return base_lr / start_div + (base_lr - base_lr / start_div) * step / warm
    frac = min((step - warm) / max(total - warm, 1), 1.0)
    lo = base_lr / final_div
    return lo + 0.5 * (base_lr - lo) * (1.0 + np.cos(np.pi * frac))


@dataclass
class OptState:
    base_lr: float = 3e-3
    total_steps: int = 1000
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @property
    def lr(self) -> float:
        return one_cycle_lr(self.step, self.total_steps, self.base_lr, self.warmup_fraction)


def opt_step(head: MlpHead, grads: list[np.ndarray], opt: OptState) -> MlpHead:
    """One bias-corrected Adam update, in place."""
    params = head.params()
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    lr = opt.lr
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        g = g.astype(p.dtype, copy=False)
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype, copy=False)
    return head


def save_checkpoint(path, head: MlpHead, opt: OptState | None = None, meta: dict | None = None) -> None:
    header = {
        "widths": head.widths,
        "slope": head.slope,
        "dtype": np.dtype(head.dtype).name,
        "opt": None if opt is None else {
            "base_lr": opt.base_lr, "total_steps": opt.total_steps,
            "warmup_fraction": opt.warmup_fraction, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step": opt.step, "has_moments": bool(opt.m)},
        "meta": meta or {},
    }
    arrays = list(head.params())
    if opt is not None and opt.m:
        arrays += list(opt.m) + list(opt.v)
    payload = io.BytesIO()
    for a in arrays:
        payload.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = payload.getvalue()
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, len(hdr), zlib.crc32(hdr + body)))
        fh.write(hdr)
        fh.write(body)


def load_checkpoint(path) -> tuple[MlpHead, OptState | None, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise SchemaMismatch("not a poiloc checkpoint (bad magic)")
        version, hlen, crc = struct.unpack("<III", blob[8:20])
        if version != CHECKPOINT_VERSION:
            raise SchemaMismatch(f"unsupported checkpoint version {version}")
        hdr, body = blob[20:20 + hlen], blob[20 + hlen:]
        if zlib.crc32(hdr + body) != crc:
            raise SchemaMismatch("checkpoint checksum mismatch")
        header = json.loads(hdr)
        widths = header["widths"]
        dtype = np.dtype(header["dtype"])
        shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            shapes.extend([(a, b), (b,)])
        opt_hdr = header["opt"]
        n_sets = 3 if opt_hdr and opt_hdr.get("has_moments") else 1
        flat = np.frombuffer(body, dtype="<f8")
        expected = n_sets * sum(int(np.prod(s)) for s in shapes)
        if flat.size != expected:
            raise SchemaMismatch("checkpoint payload size does not match its header")
        arrays, pos = [], 0
        for _ in range(n_sets):
            for s in shapes:
                size = int(np.prod(s))
                arrays.append(flat[pos:pos + size].reshape(s).astype(dtype))
                pos += size
    except (struct.error, KeyError, ValueError, TypeError) as exc:
        raise SchemaMismatch(f"unreadable checkpoint: {exc}") from exc
    n = len(shapes)
    head = MlpHead(arrays[0:n:2], arrays[1:n:2], header["slope"])
    opt = None
    if opt_hdr:
        opt = OptState(**{k: opt_hdr[k] for k in
                          ("base_lr", "total_steps", "warmup_fraction", "beta1", "beta2", "eps", "step")})
        if n_sets == 3:
            opt.m = arrays[n:2 * n]
            opt.v = arrays[2 * n:3 * n]
    return head, opt, header.get("meta", {})
