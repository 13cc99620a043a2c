import numpy as np
import pytest

from poiloc.errors import EmptyList, InvalidConfig, TooFewCorrespondences
from poiloc.geometry import Pose, project_points, rotation_error_deg, translation_error_m
from poiloc.pnp import (RansacConfig, inlier_mask, ransac_pnp, reprojection_errors, select_model,
                        solve_pnp_minimal)
from conftest import looking_pose, pnp_problem


def test_minimal_exact(rng, k):
    for _ in range(10):
        pose, uv, pts, _ = pnp_problem(rng, k, n=4)
        est = solve_pnp_minimal(uv, pts, k)
        assert translation_error_m(est, pose) < 1e-6
        assert rotation_error_deg(est, pose) < 1e-4


def test_minimal_coplanar(rng, k):
    pose = looking_pose(rng)
    pts = np.array([[0.3, 0.1, 0.0], [-0.4, 0.5, 0.0], [0.2, -0.6, 0.0], [-0.5, -0.3, 0.0]])
    uv, _ = project_points(pts, pose, k)
    est = solve_pnp_minimal(uv, pts, k)
    assert translation_error_m(est, pose) < 1e-6


def test_minimal_needs_four(rng, k):
    pose, uv, pts, _ = pnp_problem(rng, k, n=5)
    with pytest.raises(InvalidConfig):
        solve_pnp_minimal(uv, pts, k)


def test_ransac_exact(rng, k):
    pose, uv, pts, _ = pnp_problem(rng, k)
    est, ratio = ransac_pnp(uv, pts, k)
    assert ratio == 1.0
    assert translation_error_m(est, pose) < 1e-6


def test_ransac_outliers(rng, k):
    pose, uv, pts, bad = pnp_problem(rng, k, outlier_fraction=0.4)
    est, ratio = ransac_pnp(uv, pts, k, RansacConfig(seed=1))
    assert translation_error_m(est, pose) < 1e-2
    mask = inlier_mask(est, uv, pts, k, 10.0)
    assert not mask[bad].any()
    assert ratio == pytest.approx(0.6, abs=0.02)


def test_ransac_deterministic(rng, k):
    _, uv, pts, _ = pnp_problem(rng, k, outlier_fraction=0.3)
    a, ra = ransac_pnp(uv, pts, k, RansacConfig(seed=4))
    b, rb = ransac_pnp(uv, pts, k, RansacConfig(seed=4))
    assert ra == rb and np.array_equal(a.matrix(), b.matrix())


def test_ransac_skips_non_finite(rng, k):
    pose, uv, pts, _ = pnp_problem(rng, k, n=50)
    pts[:5] = np.nan
    est, ratio = ransac_pnp(uv, pts, k)
    assert translation_error_m(est, pose) < 1e-6 and ratio == pytest.approx(0.9)


def test_too_few(k):
    with pytest.raises(TooFewCorrespondences):
        ransac_pnp(np.zeros((3, 2)), np.zeros((3, 3)), k)


def test_reprojection_errors(rng, k):
    pose, uv, pts, _ = pnp_problem(rng, k, n=20)
    assert np.max(reprojection_errors(pose, uv, pts, k)) < 1e-9


def test_select_model():
    assert select_model([(None, 0.2), (None, 0.7), (None, 0.7)]) == 1
    with pytest.raises(EmptyList):
        select_model([])
