import json
import math

import numpy as np
import pytest

from camcal.calibration import CalibrationEstimate
from camcal.errors import InvisiblePoseError
from camcal.geometry import BoardSpec, CameraTruth, Distortion, Intrinsics, Pose
from camcal.simulator import (
    DEFAULT_TRUTH,
    ExperimentConfig,
    MetricSeries,
    NoiseModel,
    StrategySpec,
    abs_rms_err,
    aggregate_runs,
    make_eval_poses,
    run_experiment,
    run_session,
    sample_visible_pose,
    simulate_detection,
)

from conftest import IMG_H, IMG_W, TRUTH_DIST, TRUTH_INTR


SMALL_CONFIG = ExperimentConfig(
    repetitions=2,
    frames_cap=5,
    eval_pose_count=20,
    strategies=("random",),
)


def test_default_truth_matches_reference_camera():
    t = DEFAULT_TRUTH
    assert (t.intrinsics.alpha, t.intrinsics.beta) == (1068.0, 1073.0)
    assert (t.intrinsics.u0, t.intrinsics.v0) == (635.0, 355.0)
    assert t.distortion.as_array() == pytest.approx([-0.0031, -0.2059, -0.0028, -0.0038, 0.2478])
    assert (t.width, t.height) == (1280, 720)


class TestSimulateDetection:
    def test_noise_free_exact(self, truth, board):
        pose = Pose.from_degrees(30, -20, 10, 0, 0, 1100)
        f1 = simulate_detection(pose, truth, board, NoiseModel(0.0), np.random.default_rng(0))
        f2 = simulate_detection(pose, truth, board, NoiseModel(0.0), np.random.default_rng(99))
        assert np.array_equal(f1.pixels, f2.pixels)
        assert len(f1) == 40

    def test_noise_statistics(self, truth, board):
        pose = Pose.from_degrees(20, 10, 5, 0, 0, 1200)
        clean = simulate_detection(pose, truth, board, NoiseModel(0.0), np.random.default_rng(0))
        rng = np.random.default_rng(7)
        sq = []
        for _ in range(300):  # 300 x 40 corners x 2 coords
            noisy = simulate_detection(pose, truth, board, NoiseModel(0.1), rng)
            assert len(noisy) == 40  # far from borders: nothing dropped
            sq.append(((noisy.pixels - clean.pixels) ** 2).mean())
        assert np.mean(sq) == pytest.approx(0.1, rel=0.1)

    def test_invisible_pose_raises(self, truth, board):
        with pytest.raises(InvisiblePoseError):
            simulate_detection(Pose(0, 0, 0, 0, 0, 50.0), truth, board, NoiseModel(0.0), np.random.default_rng(0))

    def test_border_corners_dropped(self, board):
        # A camera whose projection puts corners right at the border; heavy
        # noise pushes some outside and they vanish from the frame.
        truth = CameraTruth(Intrinsics(1000.0, 1000.0, 640.0, 360.0), Distortion(), 1280, 720)
        pose = Pose(0, 0, 0, -530.0, 0, 1000.0)
        bp_visible = simulate_detection(pose, truth, board, NoiseModel(0.0), np.random.default_rng(0))
        assert len(bp_visible) == 40
        rng = np.random.default_rng(1)
        sizes = [len(simulate_detection(pose, truth, board, NoiseModel(25.0), rng)) for _ in range(50)]
        assert min(sizes) < 40


class TestAbsRms:
    def test_zero_for_truth(self, truth, board):
        est = CalibrationEstimate(truth.intrinsics, truth.distortion, (), np.zeros(9), 0.0)
        poses = make_eval_poses(truth, board, count=10, seed=1)
        assert abs_rms_err(est, truth, poses, board) == 0.0

    def test_principal_point_shift_exact(self, board):
        truth = CameraTruth(Intrinsics(1000.0, 1000.0, 640.0, 360.0), Distortion(), 1280, 720)
        est = CalibrationEstimate(
            Intrinsics(1000.0, 1000.0, 641.0, 360.0), Distortion(), (), np.zeros(9), 0.0,
        )
        poses = make_eval_poses(truth, board, count=10, seed=2)
        assert abs_rms_err(est, truth, poses, board) == pytest.approx(1.0, abs=1e-12)

    def test_linear_scaling(self, board):
        truth = CameraTruth(Intrinsics(1000.0, 1000.0, 640.0, 360.0), Distortion(), 1280, 720)
        poses = make_eval_poses(truth, board, count=10, seed=3)
        est1 = CalibrationEstimate(Intrinsics(1000.0, 1000.0, 641.0, 360.0), Distortion(), (), np.zeros(9), 0.0)
        est2 = CalibrationEstimate(Intrinsics(1000.0, 1000.0, 642.0, 360.0), Distortion(), (), np.zeros(9), 0.0)
        assert abs_rms_err(est2, truth, poses, board) == pytest.approx(
            2.0 * abs_rms_err(est1, truth, poses, board), rel=1e-12,
        )

    def test_matches_two_pass_recomputation(self, truth, board):
        from camcal.geometry import project_points

        est = CalibrationEstimate(
            Intrinsics(1050.0, 1090.0, 630.0, 350.0),
            Distortion(-0.01, -0.15, 0.0, -0.002, 0.2),
            (), np.zeros(9), 0.0,
        )
        poses = make_eval_poses(truth, board, count=15, seed=4)
        total, n = 0.0, 0
        for pose in poses:
            for q in board.corner_points():
                uv_t, _ = project_points(q.reshape(1, 3), pose, truth.intrinsics, truth.distortion)
                uv_e, _ = project_points(q.reshape(1, 3), pose, est.intrinsics, est.distortion)
                total += float(((uv_t - uv_e) ** 2).sum())
                n += 1
        expected = math.sqrt(total / n)
        assert abs_rms_err(est, truth, poses, board) == pytest.approx(expected, rel=1e-12)

    def test_eval_poses_deterministic(self, truth, board):
        a = make_eval_poses(truth, board, count=5, seed=11)
        b = make_eval_poses(truth, board, count=5, seed=11)
        assert all(p == q for p, q in zip(a, b))


class TestSampleVisible:
    def test_samples_are_visible_and_bounded(self, truth, board):
        from camcal.geometry import project_board

        rng = np.random.default_rng(5)
        for _ in range(20):
            p = sample_visible_pose(rng, truth.intrinsics, truth.distortion, board, truth.width, truth.height)
            assert project_board(board, p, truth.intrinsics, truth.distortion, truth.width, truth.height).visible
            for angle in (p.xr, p.yr, p.zr):
                assert abs(angle) <= math.radians(70.0) + 1e-12


class TestRunSession:
    def test_random_strategy_full_series(self):
        config = ExperimentConfig(repetitions=1, frames_cap=8, eval_pose_count=20)
        series = run_session(config, "random", seed=0)
        assert series.frames == list(range(1, 9))
        assert all(math.isfinite(v) for v in series.abs_rms)
        assert all(math.isfinite(v) and v >= 0 for v in series.sum_iod)
        # Full model from frame 3 onward.
        assert all(v > 0 for v in series.sum_iod[2:])

    def test_determinism(self):
        config = ExperimentConfig(repetitions=1, frames_cap=6, eval_pose_count=15)
        s1 = run_session(config, "random", seed=3)
        s2 = run_session(config, "random", seed=3)
        assert s1.sum_iod == s2.sum_iod
        assert s1.abs_rms == s2.abs_rms

    def test_generated_strategy_runs(self):
        config = ExperimentConfig(repetitions=1, frames_cap=6, eval_pose_count=15)
        series = run_session(config, "generated", seed=1)
        assert len(series.frames) == 6

    def test_strategy_presets(self):
        s = StrategySpec.parse("search_rms_err")
        assert s.kind == "search" and s.loss == "rms_err" and s.initial == "generated"
        with pytest.raises(ValueError):
            StrategySpec.parse("bogus")
        d = StrategySpec.parse({"name": "custom", "kind": "search", "loss": "max_iod", "initial": "random"})
        assert d.loss == "max_iod"


class TestAggregation:
    def test_single_repetition_equals_run(self):
        run = MetricSeries(frames=[1, 2, 3], sum_iod=[3.0, 2.0, 1.0], abs_rms=[9.0, 4.0, 1.0])
        table = aggregate_runs("x", [run])
        assert table.mean_sum_iod == [3.0, 2.0, 1.0]
        assert table.mean_abs_rms == [9.0, 4.0, 1.0]
        assert table.std_abs_rms == [0.0, 0.0, 0.0]

    def test_ln_columns(self):
        run = MetricSeries(frames=[1, 2], sum_iod=[math.e, 0.0], abs_rms=[1.0, math.e**2])
        table = aggregate_runs("x", [run])
        assert table.ln_sum_iod[0] == pytest.approx(1.0)
        assert math.isnan(table.ln_sum_iod[1])  # log only for positive values
        assert table.ln_abs_rms == [pytest.approx(0.0), pytest.approx(2.0)]

    def test_short_runs_padded_with_last_value(self):
        a = MetricSeries(frames=[1, 2, 3], sum_iod=[3.0, 2.0, 1.0], abs_rms=[3.0, 2.0, 1.0])
        b = MetricSeries(frames=[1, 2], sum_iod=[5.0, 4.0], abs_rms=[5.0, 4.0])
        table = aggregate_runs("x", [a, b])
        assert table.mean_abs_rms[2] == pytest.approx((1.0 + 4.0) / 2)


class TestRunExperiment:
    def test_writes_csv_and_summary(self, tmp_path):
        result = run_experiment(SMALL_CONFIG, out_dir=tmp_path)
        csv_path = tmp_path / "random.csv"
        assert csv_path.exists()
        header = csv_path.read_text().splitlines()[0]
        assert header == "frames,mean_sum_iod,ln_sum_iod,mean_abs_rms,ln_abs_rms,std_abs_rms"
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert "random" in summary["strategies"]
        assert result.tables["random"].frames == [1, 2, 3, 4, 5]

    def test_byte_identical_across_runs(self, tmp_path):
        run_experiment(SMALL_CONFIG, out_dir=tmp_path / "a")
        run_experiment(SMALL_CONFIG, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "random.csv").read_bytes() == (tmp_path / "b" / "random.csv").read_bytes()
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()

    def test_parallel_equals_serial(self, tmp_path):
        run_experiment(SMALL_CONFIG, out_dir=tmp_path / "serial", jobs=1)
        run_experiment(SMALL_CONFIG, out_dir=tmp_path / "parallel", jobs=2)
        assert (tmp_path / "serial" / "random.csv").read_bytes() == (
            tmp_path / "parallel" / "random.csv"
        ).read_bytes()

    def test_config_round_trip(self):
        config = ExperimentConfig(repetitions=3, strategies=("random", "search_sum_iod"))
        back = ExperimentConfig.from_dict(config.to_dict())
        assert back.repetitions == 3
        assert [s.name for s in back.strategy_specs()] == ["random", "search_sum_iod"]
        assert back.truth.intrinsics.alpha == 1068.0
