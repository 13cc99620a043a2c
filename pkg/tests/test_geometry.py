import numpy as np
import pytest

from poiloc.errors import BehindCamera
from poiloc.geometry import (Intrinsics, Pose, backproject, format_pose, parse_poses, project,
                             project_points, reprojection_error, rotation_error_deg,
                             translation_error_m)
from conftest import looking_pose, random_pose


def test_optical_axis_hits_principal_point(k):
    assert np.allclose(project([0, 0, 2], Pose.identity(), k), [320, 240])


def test_pinhole_offset(k):
    # u = cx + fx * x / z = 320 + 500 * 0.2 / 2
    assert np.allclose(project([0.2, 0, 2], Pose.identity(), k), [370, 240])


@pytest.mark.parametrize("z", [-1.0, 0.0, 0.005])
def test_behind_camera(k, z):
    with pytest.raises(BehindCamera):
        project([0, 0, z], Pose.identity(), k)


def test_reprojection_error_examples(k):
    pose = Pose.identity()
    gt = np.array([0.1, -0.05, 2.0])
    px = project(gt, pose, k)
    assert reprojection_error(gt, px, pose, k) == pytest.approx(0.0, abs=1e-9)
    assert reprojection_error(gt * 1.7, px, pose, k) == pytest.approx(0.0, abs=1e-9)
    # 500 * 0.02 / 2 = 5 px for a perpendicular offset at 2 m
    on_axis = project([0, 0, 2], pose, k)
    assert reprojection_error([0.02, 0, 2], on_axis, pose, k) == pytest.approx(5.0)


def test_rotation_error_examples():
    a = Pose.from_axis_angle([0.3, -0.2, 0.9], 0.7, [1, 2, 3])
    b = a.compose(Pose.from_axis_angle([0, 0, 1], np.radians(10)))
    assert rotation_error_deg(a, a) == pytest.approx(0.0, abs=1e-6)
    assert rotation_error_deg(a, b) == pytest.approx(10.0, abs=1e-9)
    flipped = Pose(-a.rotation, a.translation)
    assert rotation_error_deg(a, flipped) == pytest.approx(0.0, abs=1e-6)


def test_translation_error_examples():
    a = Pose.from_axis_angle([1, 0, 0], 0.4, [0.5, 0.5, 0.5])
    b = Pose(a.rotation, a.translation + [0.03, 0, 0.04])
    assert translation_error_m(a, a) == 0.0
    assert translation_error_m(a, b) == pytest.approx(0.05)
    spun = Pose.from_axis_angle([0, 1, 0], 1.0, a.translation)
    assert translation_error_m(a, spun) == pytest.approx(0.0, abs=1e-12)


def test_pose_invariants(rng):
    for _ in range(100):
        p, q = random_pose(rng), random_pose(rng)
        assert np.linalg.norm(p.compose(q).rotation) == pytest.approx(1.0, abs=1e-12)
        ident = p.compose(p.inverse())
        assert rotation_error_deg(ident, Pose.identity()) < 1e-6
        assert np.linalg.norm(ident.translation) < 1e-9


def test_long_composition_stays_normalised(rng):
    step = Pose.from_axis_angle([0.2, 0.5, 0.1], 0.013, [0.01, 0, 0])
    p = Pose.identity()
    for _ in range(5000):
        p = p.compose(step)
    assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-12


def test_compose_matches_matrix_product(rng):
    p, q = random_pose(rng), random_pose(rng)
    assert np.allclose(p.compose(q).matrix(), p.matrix() @ q.matrix(), atol=1e-12)


def test_reprojection_of_own_projection_is_zero(rng, k):
    for _ in range(50):
        pose = looking_pose(rng)
        pts = rng.uniform(-1, 1, size=(20, 3)) + [0, 0, 1]
        uv, z = project_points(pts, pose, k)
        for p, px in zip(pts[z > 0.1], uv[z > 0.1]):
            assert reprojection_error(p, px, pose, k) < 1e-6


def test_rotation_error_symmetric_and_triangle(rng):
    for _ in range(200):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        ab, ba = rotation_error_deg(a, b), rotation_error_deg(b, a)
        assert ab == pytest.approx(ba, abs=1e-6)
        assert 0.0 <= ab <= 180.0
        assert ab <= rotation_error_deg(a, c) + rotation_error_deg(c, b) + 1e-6


def test_backproject_round_trip(rng, k):
    pose = looking_pose(rng)
    px = rng.uniform([0, 0], [640, 480], size=(50, 2))
    depth = rng.uniform(0.5, 8.0, size=50)
    uv, _ = project_points(backproject(px, depth, pose, k), pose, k)
    assert np.max(np.abs(uv - px)) < 1e-6


def test_pose_text_round_trip(rng):
    poses = [random_pose(rng) for _ in range(5)]
    text = "\n".join(format_pose(p) for p in poses)
    back = parse_poses(text)
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-15)


def test_pose_is_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


@pytest.mark.parametrize("kw", [dict(fx=0), dict(cx=0), dict(cy=480), dict(fy=-1)])
def test_intrinsics_validation(kw):
    args = dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    args.update(kw)
    with pytest.raises(ValueError):
        Intrinsics(**args)
