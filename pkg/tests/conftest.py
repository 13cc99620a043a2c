import numpy as np
import pytest

from poiloc.geometry import Intrinsics, Pose
from poiloc.scene import SceneConfig, default_intrinsics, generate_scene


@pytest.fixture
def k() -> Intrinsics:
    return default_intrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneConfig(point_count=1000, seed=7))


def random_pose(rng) -> Pose:
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.normal(0.0, 2.0, size=3))


def looking_pose(rng, target=(0.0, 0.0, 1.0), dist=(3.0, 5.0)) -> Pose:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = np.asarray(target) + rng.uniform(*dist) * d
    return Pose.look_at(eye, target)


def pnp_problem(rng, k, n=200, outlier_fraction=0.0):
    """Exact correspondences seen by a random camera, a share of them replaced by junk."""
    pose = looking_pose(rng, dist=(3.0, 6.0))
    from poiloc.geometry import project_points
    pts = rng.uniform(-1.5, 1.5, size=(4 * n, 3)) + [0.0, 0.0, 1.0]
    uv, z = project_points(pts, pose, k)
    ok = (z > 0.5) & np.all(np.isfinite(uv), 1) & k.contains(np.nan_to_num(uv, nan=-1))
    pts, uv = pts[ok][:n], uv[ok][:n]
    n_out = int(round(outlier_fraction * n))
    bad = rng.choice(n, n_out, replace=False)
    # junk pixels far from where the point projects
    for i in bad:
        while True:
            cand = rng.uniform([0, 0], [k.width, k.height])
            if np.linalg.norm(cand - uv[i]) > 50:
                uv[i] = cand
                break
    return pose, uv, pts, bad
