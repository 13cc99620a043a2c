"""Rigid poses, the pinhole camera and pose-error metrics.

Convention: a :class:`Pose` maps camera coordinates to world coordinates,
``X_world = R @ X_cam + t``. The camera looks along its +z axis, x points
right and y points down in the image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BehindCamera, InvalidConfig

Z_MIN = 0.01


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("quaternion has zero or non-finite norm")
    q = q / n
    # canonical hemisphere keeps text round-trips stable
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; input is assumed to be (close to) a rotation."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _quat_normalize(np.array(q))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-10:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform stored as a unit quaternion (w, x, y, z)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _quat_normalize(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        if M.shape == (4, 4):
            R, t = M[:3, :3], M[:3, 3]
        elif M.shape == (3, 4):
            R, t = M[:, :3], M[:, 3]
        else:
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {M.shape}")
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle_rad: float,
                        translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle_rad
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return cls(q, translation)

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float],
                up: Sequence[float] = (0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` whose optical axis points at ``target``.

        ``up`` is the world direction that should appear upwards in the image.
        """
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z = z / np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-8:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_rt(np.stack([x, y, z], axis=1), eye)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return Pose(q, t)

    def inverse(self) -> "Pose":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -(quat_to_matrix(q) @ self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points to world frame."""
        return np.asarray(points) @ self.R.T + self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World-frame points to camera frame."""
        return (np.asarray(points) - self.translation) @ self.R

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidConfig("intrinsics: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidConfig("intrinsics: principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels)
        return ((pixels[..., 0] >= 0) & (pixels[..., 0] < self.width)
                & (pixels[..., 1] >= 0) & (pixels[..., 1] < self.height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def project_points(points: np.ndarray, pose: Pose, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection without the depth check.

    Returns ``(pixels (N, 2), depth (N,))``; pixels are meaningless where
    depth is not positive.
    """
    pc = pose.to_camera(np.atleast_2d(points))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
    return np.stack([u, v], axis=1), z


def project(p: Sequence[float], pose: Pose, k: Intrinsics, z_min: float = Z_MIN) -> np.ndarray:
    uv, z = project_points(np.asarray(p, dtype=np.float64)[None], pose, k)
    if not z[0] > z_min:
        raise BehindCamera(f"camera-frame depth {z[0]:.4g} m is not beyond z_min={z_min}")
    return uv[0]


def pixel_rays(pixels: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions scaled to unit z-depth."""
    pixels = np.atleast_2d(pixels)
    return np.stack([(pixels[:, 0] - k.cx) / k.fx,
                     (pixels[:, 1] - k.cy) / k.fy,
                     np.ones(len(pixels))], axis=1)


def backproject(pixel: np.ndarray, depth, pose: Pose, k: Intrinsics) -> np.ndarray:
    """World point at z-depth ``depth`` behind ``pixel``; accepts (2,) or (N, 2)."""
    single = np.ndim(pixel) == 1
    rays = pixel_rays(pixel, k) * np.reshape(depth, (-1, 1))
    world = pose.transform(rays)
    return world[0] if single else world


def reprojection_error(pred: Sequence[float], gt_pixel: Sequence[float], pose: Pose,
                       k: Intrinsics, z_min: float = Z_MIN) -> float:
    uv = project(pred, pose, k, z_min)
    return float(np.linalg.norm(uv - np.asarray(gt_pixel, dtype=np.float64)))


def rotation_error_deg(a: Pose, b: Pose) -> float:
    # |<qa, qb>| = cos(theta / 2), robust to the double cover
    d = abs(float(np.dot(a.rotation, b.rotation)))
    return float(np.degrees(2.0 * np.arccos(min(1.0, d))))


def translation_error_m(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.center - b.center))


def format_pose(pose: Pose) -> str:
    return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in pose.matrix())


def parse_poses(text: str) -> list[Pose]:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if len(rows) % 4:
        raise ValueError("pose file must hold 4-line blocks")
    poses = []
    for i in range(0, len(rows), 4):
        M = np.array(rows[i:i + 4], dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError(f"pose block {i // 4} is not 4x4")
        poses.append(Pose.from_matrix(M))
    return poses


def write_poses(path, poses: Iterable[Pose]) -> None:
    with open(path, "w") as fh:
        for pose in poses:
            fh.write(format_pose(pose) + "\n")


def read_poses(path) -> list[Pose]:
    with open(path) as fh:
        return parse_poses(fh.read())
