import math

import numpy as np
import pytest

from camcal.errors import BehindCameraError, NonConvergenceError
from camcal.geometry import (
    BoardSpec,
    Distortion,
    Intrinsics,
    Pose,
    decompose_pose,
    distort,
    euler_to_rotation,
    project,
    project_board,
    project_points,
    rotation_to_euler,
    undistort,
)

from conftest import IMG_H, IMG_W, TRUTH_DIST, TRUTH_INTR


class TestEulerRotation:
    def test_zero_angles_give_identity(self):
        assert np.allclose(euler_to_rotation(0, 0, 0), np.eye(3))

    def test_half_turn_about_x(self):
        assert np.allclose(euler_to_rotation(math.pi, 0, 0), np.diag([1.0, -1.0, -1.0]), atol=1e-15)

    def test_orthonormal_and_round_trip(self):
        R = euler_to_rotation(0.3, -0.2, 0.1)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        e = rotation_to_euler(R)
        assert np.allclose([e.xr, e.yr, e.zr], [0.3, -0.2, 0.1], atol=1e-12)

    def test_identity_decomposes_to_zeros(self):
        e = rotation_to_euler(np.eye(3))
        assert (e.xr, e.yr, e.zr) == (0.0, 0.0, 0.0)
        assert not e.gimbal_lock

    def test_round_trip_specific(self):
        e = rotation_to_euler(euler_to_rotation(0.5, 0.2, -0.4))
        assert np.allclose([e.xr, e.yr, e.zr], [0.5, 0.2, -0.4], atol=1e-9)

    def test_gimbal_lock_flag(self):
        R = euler_to_rotation(0.3, math.pi / 2, 0.0)
        assert R[2, 0] == pytest.approx(-1.0)
        e = rotation_to_euler(R)
        assert e.gimbal_lock
        assert e.zr == 0.0
        assert np.abs(euler_to_rotation(e.xr, e.yr, e.zr) - R).max() < 1e-9

    def test_round_trip_property_1000(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            angles = rng.uniform(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3, 3)
            e = rotation_to_euler(euler_to_rotation(*angles))
            worst = max(worst, np.abs(np.array([e.xr, e.yr, e.zr]) - angles).max())
        assert worst < 1e-9

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            rotation_to_euler(np.eye(3) * 1.01)


class TestDistortion:
    def test_zero_coefficients_identity(self):
        d = Distortion()
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (200, 2))
        xd, yd = distort(pts[:, 0], pts[:, 1], d)
        assert np.array_equal(xd, pts[:, 0])
        assert np.array_equal(yd, pts[:, 1])

    def test_origin_fixed_point(self):
        assert distort(0.0, 0.0, TRUTH_DIST) == (0.0, 0.0)

    def test_reference_coefficients_term_by_term(self):
        # Independent scalar evaluation of the radial + tangential series.
        x = y = 0.1
        k1, k2, k3, p1, p2 = -0.0031, -0.2059, -0.0028, -0.0038, 0.2478
        r2 = x * x + y * y
        radial = 1 + k1 * r2 + k2 * r2**2 + k3 * r2**3
        expected_x = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        expected_y = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        xd, yd = distort(x, y, TRUTH_DIST)
        assert xd == pytest.approx(expected_x, rel=0, abs=1e-15)
        assert yd == pytest.approx(expected_y, rel=0, abs=1e-15)

    def test_undistort_identity_for_zero(self):
        assert undistort(0.3, -0.2, Distortion()) == (0.3, -0.2)

    def test_undistort_round_trip_mild(self):
        d = Distortion(k1=-0.1)
        xd, yd = distort(0.05, -0.03, d)
        x, y = undistort(xd, yd, d)
        assert x == pytest.approx(0.05, abs=1e-8)
        assert y == pytest.approx(-0.03, abs=1e-8)

    def test_undistort_diverges_far_outside(self):
        with pytest.raises(NonConvergenceError):
            undistort(5.0, 5.0, TRUTH_DIST)

    def test_undistort_distort_grid_property(self):
        d = Distortion(k1=-0.08, k2=0.01, p1=0.001, p2=-0.002)
        xs = np.linspace(-0.4, 0.4, 9)
        for x0 in xs:
            for y0 in np.linspace(-0.25, 0.25, 7):
                xd, yd = distort(x0, y0, d)
                x, y = undistort(xd, yd, d)
                assert abs(x - x0) < 1e-8 and abs(y - y0) < 1e-8


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        p = Pose(0, 0, 0, 0, 0, 1000.0)
        assert project((0, 0, 0), p, TRUTH_INTR, Distortion()) == (635.0, 355.0)

    def test_one_square_offset(self):
        p = Pose(0, 0, 0, 0, 0, 1000.0)
        u, v = project((28.0, 0, 0), p, TRUTH_INTR, Distortion())
        assert u == pytest.approx(635.0 + 1068.0 * 28.0 / 1000.0, abs=1e-12)
        assert v == pytest.approx(355.0, abs=1e-12)

    def test_behind_camera_raises(self):
        p = Pose(0, 0, 0, 0, 0, -500.0)
        with pytest.raises(BehindCameraError):
            project((0, 0, 0), p, TRUTH_INTR, Distortion())

    def test_chained_equals_composed(self):
        # Oracle: explicit world->camera->normalized->distorted->pixel chain.
        rng = np.random.default_rng(3)
        for _ in range(50):
            pose = Pose(*rng.uniform(-0.8, 0.8, 3), *rng.uniform(-100, 100, 2), rng.uniform(500, 2000))
            q = np.append(rng.uniform(-120, 120, 2), 0.0)
            cam = pose.rotation() @ q + pose.translation()
            x, y = cam[0] / cam[2], cam[1] / cam[2]
            xd, yd = distort(x, y, TRUTH_DIST)
            K = TRUTH_INTR.matrix()
            pix = K @ np.array([xd, yd, 1.0])
            u, v = project(q, pose, TRUTH_INTR, TRUTH_DIST)
            assert abs(u - pix[0]) < 1e-10 and abs(v - pix[1]) < 1e-10

    def test_skew_term_enters_pixel_mapping(self):
        intr = Intrinsics(1000.0, 1000.0, 640.0, 360.0, gamma=5.0)
        pose = Pose(0, 0, 0, 0, 30.0, 1000.0)
        u, _ = project((0.0, 0.0, 0.0), pose, intr, Distortion())
        assert u == pytest.approx(640.0 + 5.0 * 0.03, abs=1e-12)


class TestBoard:
    def test_default_corner_count_is_40(self, board):
        assert board.corner_count == 40
        assert len(board.corner_points()) == 40

    def test_corner_count_formula(self):
        b = BoardSpec(cols=7, rows=5, square_size=20.0)
        assert b.corner_count == (7 - 1) * (5 - 1)

    def test_corners_centered_in_plane(self, board):
        pts = board.corner_points()
        assert np.allclose(pts[:, 2], 0.0)
        assert np.allclose(pts.mean(axis=0), 0.0)

    def test_row_major_ids(self, board):
        pts = board.corner_points()
        # id 0 is the (-x, -y) corner; ids advance along x first.
        assert pts[0, 0] < pts[1, 0]
        assert pts[0, 1] == pts[1, 1]
        assert pts[8, 1] > pts[0, 1]

    def test_frontal_board_visible(self, board):
        bp = project_board(board, Pose(0, 0, 0, 0, 0, 1000.0), TRUTH_INTR, TRUTH_DIST, IMG_W, IMG_H)
        assert bp.visible
        assert len(bp.pixels) == 40

    def test_too_close_board_invisible(self, board):
        bp = project_board(board, Pose(0, 0, 0, 0, 0, 50.0), TRUTH_INTR, Distortion(), IMG_W, IMG_H)
        assert not bp.visible
        assert len(bp.pixels) == 40

    def test_steep_tilt_returns_all_corners(self, board):
        pose = Pose(math.radians(70), 0, 0, 0, 0, 2500.0)
        bp = project_board(board, pose, TRUTH_INTR, Distortion(), IMG_W, IMG_H)
        assert len(bp.pixels) == 40
        # Foreshortened: vertical extent well below the frontal one.
        frontal = project_board(board, Pose(0, 0, 0, 0, 0, 2500.0), TRUTH_INTR, Distortion(), IMG_W, IMG_H)
        assert np.ptp(bp.pixels[:, 1]) < 0.6 * np.ptp(frontal.pixels[:, 1])


class TestDecomposition:
    def test_translation_only_gives_identical_steps(self):
        p = Pose(0, 0, 0, 10.0, -20.0, 900.0)
        steps = decompose_pose(p)
        assert all(s == p for s in steps)

    def test_last_step_is_exact_pose(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = Pose(*rng.uniform(-1.2, 1.2, 3), *rng.uniform(-300, 300, 2), rng.uniform(300, 3000))
            steps = decompose_pose(p)
            assert steps[3] == p

    def test_component_order(self):
        p = Pose.from_degrees(-30, 39, 22, 5, 6, 1000)
        s1, s2, s3, s4 = decompose_pose(p)
        assert (s1.xr, s1.yr, s1.zr) == (0, 0, 0)
        assert (s2.xr, s2.yr, s2.zr) == (p.xr, 0, 0)
        assert (s3.xr, s3.yr, s3.zr) == (p.xr, p.yr, 0)
        assert (s4.xr, s4.yr, s4.zr) == (p.xr, p.yr, p.zr)
        for s in (s1, s2, s3, s4):
            assert (s.xt, s.yt, s.zt) == (p.xt, p.yt, p.zt)

    def test_step_deltas_touch_one_component_each(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = Pose(*rng.uniform(-1.2, 1.2, 3), *rng.uniform(-300, 300, 2), rng.uniform(300, 3000))
            steps = decompose_pose(p)
            arrays = [s.as_array() for s in steps]
            changed = [np.flatnonzero(arrays[i + 1] != arrays[i]) for i in range(3)]
            expected = ([0], [1], [2])
            for got, exp in zip(changed, expected):
                # A zero rotation component may produce an empty delta.
                assert list(got) == exp or (len(got) == 0 and p.as_array()[exp[0]] == 0.0)


def test_project_points_matches_project():
    pose = Pose(0.2, -0.3, 0.1, 12.0, -7.0, 1100.0)
    pts = BoardSpec().corner_points()
    uv, z = project_points(pts, pose, TRUTH_INTR, TRUTH_DIST)
    assert np.all(z > 0)
    for i in (0, 13, 39):
        u, v = project(pts[i], pose, TRUTH_INTR, TRUTH_DIST)
        assert uv[i, 0] == pytest.approx(u) and uv[i, 1] == pytest.approx(v)
