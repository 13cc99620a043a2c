"""Camera pose from 2D-3D correspondences: minimal solver, RANSAC, model choice.

The minimal solver refines four correspondences with damped Gauss-Newton
(Levenberg-Marquardt) started from algebraic guesses: a plane homography
and a scaled-orthographic POSIT estimate. The same refinement, with Huber
weights, polishes the RANSAC winner on its inliers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import (Degenerate, EmptyList, InvalidConfig, NoConvergence, NoModelFound,
                     TooFewCorrespondences)
from .geometry import Intrinsics, Pose, so3_exp, Z_MIN

log = logging.getLogger(__name__)

MIN_SET = 4


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold_px: float = 10.0
    max_hypotheses: int = 256
    min_set: int = MIN_SET
    confidence: float = 0.999
    refine_iters: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.inlier_threshold_px <= 0:
            raise InvalidConfig("ransac.inlier_threshold_px must be > 0")
        if self.max_hypotheses < 1:
            raise InvalidConfig("ransac.max_hypotheses must be >= 1")
        if self.min_set != MIN_SET:
            raise InvalidConfig("ransac.min_set is fixed at 4")
        if not 0 < self.confidence < 1:
            raise InvalidConfig("ransac.confidence must lie in (0, 1)")


def _normalized(pixels: np.ndarray, k: Intrinsics) -> np.ndarray:
    return np.stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy], axis=1)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _residuals(R, t, X, m):
    """Normalised-coordinate residuals and camera-frame points."""
    xc = X @ R.T + t
    z = xc[:, 2]
    return xc[:, :2] / z[:, None] - m, xc


def _jacobian(xc):
    """d(normalised projection)/d(left rotation increment, translation), (n, 2, 6)."""
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    iz = 1.0 / z
    Jp = np.zeros((len(xc), 2, 3))
    Jp[:, 0, 0] = iz
    Jp[:, 0, 2] = -x * iz * iz
    Jp[:, 1, 1] = iz
    Jp[:, 1, 2] = -y * iz * iz
    return Jp, x, y, z


def refine_pose(R: np.ndarray, t: np.ndarray, X: np.ndarray, m: np.ndarray, iters: int = 50,
                huber: float | None = None, tol: float = 1e-15):
    """Levenberg-Marquardt on camera-from-world (R, t); ``m`` are normalised image points.

    With ``huber`` (normalised units) residuals are reweighted each step.
    Returns ``(R, t, rms)`` or raises :class:`NoConvergence` if a point
    ends up behind the camera.
    """
    lam = 1e-3

    def cost_of(R_, t_):
        res, xc = _residuals(R_, t_, X, m)
        if np.any(xc[:, 2] <= Z_MIN):
            return np.inf, res, xc
        r = np.linalg.norm(res, axis=1)
        if huber is None:
            return float(np.sum(r * r)), res, xc
        c = np.where(r <= huber, r * r, 2 * huber * r - huber * huber)
        return float(np.sum(c)), res, xc

    cost, res, xc = cost_of(R, t)
    if not np.isfinite(cost):
        raise NoConvergence("initial pose puts points behind the camera")
    for _ in range(iters):
        Jp, *_ = _jacobian(xc)
        # the update rotates t as well, so xc moves as exp(delta) xc
        Jrot = np.einsum("nij,njk->nik", Jp, -_skew_batch(xc))
        J = np.concatenate([Jrot, Jp], axis=2).reshape(-1, 6)
        rv = res.reshape(-1)
        if huber is not None:
            r = np.linalg.norm(res, axis=1)
            w = np.where(r <= huber, 1.0, huber / np.maximum(r, 1e-300))
            w = np.repeat(w, 2)
        else:
            w = np.ones_like(rv)
        H = J.T @ (J * w[:, None])
        g = J.T @ (w * rv)
        improved = False
        for _ in range(10):
            delta = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            R_new = so3_exp(delta[:3]) @ R
            t_new = so3_exp(delta[:3]) @ t + delta[3:]
            cost_new, res_new, xc_new = cost_of(R_new, t_new)
            if cost_new < cost:
                R, t, cost, res, xc = R_new, t_new, cost_new, res_new, xc_new
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or np.linalg.norm(delta) < tol or cost < 1e-30:
            break
    return R, t, math.sqrt(cost / len(X))


def _skew_batch(v):
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _homography_init(X: np.ndarray, m: np.ndarray):
    """Treat the points as planar and decompose the plane-to-image homography."""
    o = X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X - o)
    B = Vt.T  # columns: in-plane u, in-plane v, normal
    if np.linalg.det(B) < 0:
        B[:, 2] = -B[:, 2]
    ab = (X - o) @ B[:, :2]
    A = []
    for (a, b), (x, y) in zip(ab, m):
        A.append([a, b, 1, 0, 0, 0, -x * a, -x * b, -x])
        A.append([0, 0, 0, a, b, 1, -y * a, -y * b, -y])
    _, _, Vh = np.linalg.svd(np.asarray(A))
    H = Vh[-1].reshape(3, 3)
    s = 0.5 * (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if s < 1e-12:
        return None
    H = H / s
    if H[2, 2] < 0:  # plane origin must be in front
        H = -H
    r1, r2, tp = H[:, 0], H[:, 1], H[:, 2]
    R_cp = _orthonormalize(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    R = R_cp @ B.T
    t = tp - R @ o
    return R, t


def _p3p(f: np.ndarray, P: np.ndarray) -> list[np.ndarray]:
    """Grunert's quartic: camera-frame positions of three points from unit bearings."""
    a2 = np.sum((P[1] - P[2]) ** 2)
    b2 = np.sum((P[0] - P[2]) ** 2)
    c2 = np.sum((P[0] - P[1]) ** 2)
    if b2 < 1e-18:
        return []
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]
    p, q = (a2 - c2) / b2, (a2 + c2) / b2
    r, s = c2 / b2, a2 / b2
    w, x = (b2 - c2) / b2, (b2 - a2) / b2
    coeffs = [
        (p - 1) ** 2 - 4 * r * ca ** 2,
        4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * r * ca ** 2 * cb),
        2 * (p ** 2 - 1 + 2 * p ** 2 * cb ** 2 + 2 * w * ca ** 2
             - 4 * q * ca * cb * cg + 2 * x * cg ** 2),
        4 * (-p * (1 + p) * cb + 2 * s * cg ** 2 * cb - (1 - q) * ca * cg),
        (1 + p) ** 2 - 4 * s * cg ** 2,
    ]
    out = []
    for v in np.roots(coeffs):
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        d = 1 + v * v - 2 * v * cb
        if abs(den) < 1e-12 or d <= 0:
            continue
        u = ((p - 1) * v ** 2 - 2 * p * cb * v + 1 + p) / den
        s1 = np.sqrt(b2 / d)
        if u <= 0 or v <= 0:
            continue
        out.append(np.stack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]]))
    return out


def _rigid_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares R, t with dst ~ R src + t."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((dst - cd).T @ (src - cs))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, cd - R @ cs


def _p3p_inits(X: np.ndarray, m: np.ndarray) -> list:
    """P3P on every triple with the rest as checks, best few by reprojection."""
    f = np.column_stack([m, np.ones(len(m))])
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    scored = []
    for tri in ((0, 1, 2), (1, 2, 3), (0, 2, 3), (0, 1, 3))[: max(1, len(X) - 3)]:
        tri = list(tri)
        for Q in _p3p(f[tri], X[tri]):
            R, t = _rigid_fit(X[tri], Q)
            xc = X @ R.T + t
            if np.any(xc[:, 2] <= 0):
                continue
            err = np.sum((xc[:, :2] / xc[:, 2:] - m) ** 2)
            scored.append((err, R, t))
    scored.sort(key=lambda s: s[0])
    return [(R, t) for _, R, t in scored[:4]]


def _to_pose(R_cw, t_cw) -> Pose:
    return Pose.from_rt(R_cw.T, -R_cw.T @ t_cw)


def _minimal(m: np.ndarray, X: np.ndarray, iters: int = 30):
    c = X - X.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[1] < 1e-6:
        raise Degenerate("the 3D points are collinear")
    inits = _p3p_inits(X, m)
    if sv[2] <= 1e-3 * sv[0]:
        inits.append(_homography_init(X, m))
    best = None
    for init in inits:
        if init is None:
            continue
        try:
            R, t, rms = refine_pose(init[0], init[1], X, m, iters=iters)
        except NoConvergence:
            continue
        if best is None or rms < best[2]:
            best = (R, t, rms)
    if best is None:
        raise NoConvergence("no initialisation kept the points in front of the camera")
    return best


def solve_pnp_minimal(pixels: np.ndarray, coords: np.ndarray, k: Intrinsics) -> Pose:
    """World-from-camera pose from exactly four 2D-3D correspondences."""
    pixels = np.asarray(pixels, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if pixels.shape != (4, 2) or coords.shape != (4, 3):
        raise InvalidConfig("solve_pnp_minimal needs exactly four correspondences")
    R, t, _ = _minimal(_normalized(pixels, k), coords, iters=100)
    return _to_pose(R, t)


def reprojection_errors(pose: Pose, pixels: np.ndarray, coords: np.ndarray,
                        k: Intrinsics) -> np.ndarray:
    """Pixel errors; infinite for points at or behind ``Z_MIN``."""
    xc = pose.to_camera(coords)
    z = xc[:, 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    uv = np.stack([k.fx * xc[:, 0] / zs + k.cx, k.fy * xc[:, 1] / zs + k.cy], axis=1)
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > Z_MIN, err, np.inf)


def inlier_mask(pose: Pose, pixels: np.ndarray, coords: np.ndarray, k: Intrinsics,
                threshold: float) -> np.ndarray:
    return reprojection_errors(pose, pixels, coords, k) < threshold


def _hypotheses_needed(inlier_ratio: float, confidence: float, sample: int) -> float:
    w = inlier_ratio**sample
    if w <= 0:
        return math.inf
    if w >= 1:
        return 1
    return math.log(1 - confidence) / math.log(1 - w)


def ransac_pnp(pixels: np.ndarray, coords: np.ndarray, k: Intrinsics,
               cfg: RansacConfig | None = None) -> tuple[Pose, float]:
    """Hypothesise-and-verify PnP; returns the refined pose and its inlier ratio."""
    cfg = cfg or RansacConfig()
    cfg.validate()
    pixels = np.asarray(pixels, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    n = len(pixels)
    if n < cfg.min_set:
        raise TooFewCorrespondences(f"{n} correspondences, need at least {cfg.min_set}")
    ok = np.all(np.isfinite(pixels), axis=1) & np.all(np.isfinite(coords), axis=1)
    m_all = _normalized(pixels, k)
    thr = cfg.inlier_threshold_px

    best_pose, best_count = None, -1
    needed = cfg.max_hypotheses
    h = 0
    finite_idx = np.flatnonzero(ok)
    if len(finite_idx) < cfg.min_set:
        raise TooFewCorrespondences("fewer than four finite correspondences")
    while h < min(needed, cfg.max_hypotheses):
        rng = np.random.default_rng([cfg.seed, h])
        h += 1
        idx = rng.choice(finite_idx, size=cfg.min_set, replace=False)
        try:
            R, t, _ = _minimal(m_all[idx], coords[idx], iters=20)
        except (Degenerate, NoConvergence, np.linalg.LinAlgError):
            continue
        pose = _to_pose(R, t)
        count = int(np.count_nonzero(inlier_mask(pose, pixels, coords, k, thr)))
        if count > best_count:
            best_pose, best_count = pose, count
            needed = _hypotheses_needed(count / n, cfg.confidence, cfg.min_set)
    if best_pose is None or best_count < cfg.min_set:
        raise NoModelFound("no hypothesis reached a minimal consensus set")

    # refit on the consensus set until it stops changing; a refined pose is kept
    # even if it loses a few borderline inliers against the minimal-sample fit
    pose = best_pose
    huber = thr / k.mean_focal / 2.0
    inl = inlier_mask(pose, pixels, coords, k, thr)
    for _ in range(5):
        R0 = pose.R.T
        t0 = -R0 @ pose.translation
        try:
            R, t, _ = refine_pose(R0, t0, coords[inl], m_all[inl], iters=cfg.refine_iters,
                                  huber=huber)
        except NoConvergence:
            break
        cand = _to_pose(R, t)
        cand_inl = inlier_mask(cand, pixels, coords, k, thr)
        if np.count_nonzero(cand_inl) < cfg.min_set:
            break
        pose = cand
        if np.array_equal(cand_inl, inl):
            break
        inl = cand_inl
    ratio = np.count_nonzero(inlier_mask(pose, pixels, coords, k, thr)) / n
    return pose, float(ratio)


def select_model(results) -> int:
    """Index of the highest inlier ratio; ties resolve to the lowest index."""
    results = list(results)
    if not results:
        raise EmptyList("select_model needs at least one model")
    ratios = [r[1] if isinstance(r, (tuple, list)) else float(r) for r in results]
    return int(np.argmax(ratios))
