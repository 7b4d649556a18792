"""Synthetic camera, detector noise, and the benchmark protocol.

Runs seeded end-to-end sessions under different pose-selection strategies,
recording the summed dispersion index (SumIOD) and the absolute
reprojection error against ground truth (AbsRmsErr) after every captured
frame, and aggregates repetitions into per-strategy CSV tables.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibrationEstimate, DetectedFrame
from .errors import CamcalError, InvisiblePoseError, NoVisibleBoardError
from .geometry import BoardSpec, CameraTruth, Distortion, Intrinsics, Pose, project_board, project_points
from .search import max_iod, rms_err_loss, sum_iod  # noqa: F401  (rms_err_loss re-exported)
from .session import Session, SessionConfig, SessionPhase

DEFAULT_TRUTH = CameraTruth(
    intrinsics=Intrinsics(alpha=1068.0, beta=1073.0, u0=635.0, v0=355.0),
    distortion=Distortion(k1=-0.0031, k2=-0.2059, k3=-0.0028, p1=-0.0038, p2=0.2478),
    width=1280,
    height=720,
)


@dataclass(frozen=True)
class NoiseModel:
    """I.i.d. Gaussian pixel noise, zero mean, ``variance`` px^2 per coordinate."""

    variance: float = 0.1

    def __post_init__(self) -> None:
        if self.variance < 0:
            raise ValueError("noise variance must be nonnegative")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)


def simulate_detection(
    pose: Pose,
    truth: CameraTruth,
    board: BoardSpec,
    noise: NoiseModel,
    rng: np.random.Generator,
) -> DetectedFrame:
    """Project the board through the ground-truth camera and add detector noise.

    Corners pushed outside the image by noise are dropped.  Raises
    InvisiblePoseError when the noise-free board is not fully visible.
    """
    bp = project_board(board, pose, truth.intrinsics, truth.distortion, truth.width, truth.height)
    if not bp.visible:
        raise InvisiblePoseError(f"board not fully visible under ground truth at {pose}")
    px = bp.pixels
    if noise.variance > 0:
        px = px + rng.normal(0.0, noise.sigma, px.shape)
    keep = (
        (px[:, 0] >= 0)
        & (px[:, 0] <= truth.width)
        & (px[:, 1] >= 0)
        & (px[:, 1] <= truth.height)
    )
    return DetectedFrame(ids=bp.ids[keep], pixels=px[keep], board=board)


def sample_visible_pose(
    rng: np.random.Generator,
    intrinsics: Intrinsics,
    distortion: Distortion,
    board: BoardSpec,
    width: int,
    height: int,
    rot_bound_deg: float = 70.0,
    zt_range: tuple[float, float] = (500.0, 2500.0),
    trans_frac: float = 0.2,
    max_tries: int = 2000,
) -> Pose:
    """Uniform draw over the bounded pose box, rejected until fully visible."""
    for _ in range(max_tries):
        zt = rng.uniform(*zt_range)
        p = Pose.from_degrees(
            rng.uniform(-rot_bound_deg, rot_bound_deg),
            rng.uniform(-rot_bound_deg, rot_bound_deg),
            rng.uniform(-rot_bound_deg, rot_bound_deg),
            rng.uniform(-trans_frac, trans_frac) * zt,
            rng.uniform(-trans_frac, trans_frac) * zt,
            zt,
        )
        if project_board(board, p, intrinsics, distortion, width, height).visible:
            return p
    raise NoVisibleBoardError("rejection sampling found no visible pose")


def make_eval_poses(truth: CameraTruth, board: BoardSpec, count: int = 100, seed: int = 90210) -> tuple[Pose, ...]:
    """Fixed evaluation set: seeded visible poses shared by every strategy."""
    rng = np.random.default_rng(seed)
    return tuple(
        sample_visible_pose(rng, truth.intrinsics, truth.distortion, board, truth.width, truth.height)
        for _ in range(count)
    )


def abs_rms_err(
    estimate: CalibrationEstimate,
    truth: CameraTruth,
    eval_poses,
    board: BoardSpec,
) -> float:
    """RMS pixel deviation between projections under the estimated and the
    true camera parameters, over the fixed evaluation poses."""
    pts = board.corner_points()
    total = 0.0
    n = 0
    for pose in eval_poses:
        uv_true, _ = project_points(pts, pose, truth.intrinsics, truth.distortion)
        uv_est, _ = project_points(pts, pose, estimate.intrinsics, estimate.distortion)
        d = uv_true - uv_est
        total += float((d * d).sum())
        n += len(pts)
    return math.sqrt(total / n)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategySpec:
    """Pose-selection strategy for a benchmark run."""

    name: str
    kind: str  # "random" | "generated" | "search"
    loss: str = "sum_iod"  # "sum_iod" | "rms_err" | "max_iod"
    initial: str = "generated"  # "generated" | "random"

    PRESETS = {
        "random": {"kind": "random"},
        "generated": {"kind": "generated"},
        "search_sum_iod": {"kind": "search", "loss": "sum_iod", "initial": "generated"},
        "search_rms_err": {"kind": "search", "loss": "rms_err", "initial": "generated"},
        "search_max_iod": {"kind": "search", "loss": "max_iod", "initial": "generated"},
        "search_rms_err_random_init": {"kind": "search", "loss": "rms_err", "initial": "random"},
        "search_sum_iod_random_init": {"kind": "search", "loss": "sum_iod", "initial": "random"},
    }

    @classmethod
    def parse(cls, spec) -> "StrategySpec":
        if isinstance(spec, StrategySpec):
            return spec
        if isinstance(spec, str):
            if spec not in cls.PRESETS:
                raise ValueError(f"unknown strategy preset {spec!r}; known: {sorted(cls.PRESETS)}")
            return cls(name=spec, **cls.PRESETS[spec])
        d = dict(spec)
        name = d.pop("name")
        return cls(name=name, **d)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "loss": self.loss, "initial": self.initial}


DEFAULT_STRATEGIES = ("random", "generated", "search_sum_iod", "search_rms_err")


@dataclass(frozen=True)
class ExperimentConfig:
    truth: CameraTruth = DEFAULT_TRUTH
    board: BoardSpec = BoardSpec()
    noise: NoiseModel = NoiseModel()
    frames_cap: int = 20
    repetitions: int = 20
    base_seed: int = 0
    z_preset: float = 1000.0
    eval_pose_count: int = 100
    eval_seed: int = 90210
    stop_on_convergence: bool = False
    strategies: tuple = DEFAULT_STRATEGIES
    sa: dict = field(default_factory=dict)

    def strategy_specs(self) -> list[StrategySpec]:
        return [StrategySpec.parse(s) for s in self.strategies]

    def to_dict(self) -> dict:
        t = self.truth
        return {
            "camera": {
                "alpha": t.intrinsics.alpha,
                "beta": t.intrinsics.beta,
                "u0": t.intrinsics.u0,
                "v0": t.intrinsics.v0,
                "k1": t.distortion.k1,
                "k2": t.distortion.k2,
                "k3": t.distortion.k3,
                "p1": t.distortion.p1,
                "p2": t.distortion.p2,
                "width": t.width,
                "height": t.height,
            },
            "board": self.board.to_dict(),
            "noise_variance": self.noise.variance,
            "frames_cap": self.frames_cap,
            "repetitions": self.repetitions,
            "base_seed": self.base_seed,
            "z_preset": self.z_preset,
            "eval_pose_count": self.eval_pose_count,
            "eval_seed": self.eval_seed,
            "stop_on_convergence": self.stop_on_convergence,
            "strategies": [StrategySpec.parse(s).to_dict() for s in self.strategies],
            "sa": dict(self.sa),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        if "camera" in d:
            c = d["camera"]
            kwargs["truth"] = CameraTruth(
                intrinsics=Intrinsics(c["alpha"], c["beta"], c["u0"], c["v0"]),
                distortion=Distortion(c.get("k1", 0.0), c.get("k2", 0.0), c.get("k3", 0.0),
                                      c.get("p1", 0.0), c.get("p2", 0.0)),
                width=int(c["width"]),
                height=int(c["height"]),
            )
        if "board" in d:
            kwargs["board"] = BoardSpec.from_dict(d["board"])
        if "noise_variance" in d:
            kwargs["noise"] = NoiseModel(float(d["noise_variance"]))
        for key in ("frames_cap", "repetitions", "base_seed", "eval_pose_count", "eval_seed"):
            if key in d:
                kwargs[key] = int(d[key])
        if "z_preset" in d:
            kwargs["z_preset"] = float(d["z_preset"])
        if "stop_on_convergence" in d:
            kwargs["stop_on_convergence"] = bool(d["stop_on_convergence"])
        if "strategies" in d:
            kwargs["strategies"] = tuple(
                s if isinstance(s, str) else StrategySpec.parse(s) for s in d["strategies"]
            )
        if "sa" in d:
            kwargs["sa"] = dict(d["sa"])
        return cls(**kwargs)


@dataclass
class MetricSeries:
    """Per-frame-count metric trajectories of one session run."""

    frames: list[int] = field(default_factory=list)
    sum_iod: list[float] = field(default_factory=list)
    abs_rms: list[float] = field(default_factory=list)

    def record(self, frame_count: int, iod_value: float, rms_value: float) -> None:
        self.frames.append(frame_count)
        self.sum_iod.append(iod_value)
        self.abs_rms.append(rms_value)


# ---------------------------------------------------------------------------
# Session runner
# ---------------------------------------------------------------------------

def run_session(config: ExperimentConfig, strategy, seed: int, eval_poses=None) -> MetricSeries:
    """One seeded end-to-end session under a pose-selection strategy.

    The simulated user realizes every target exactly; frames come from the
    ground-truth camera plus detector noise.
    """
    strategy = StrategySpec.parse(strategy)
    if eval_poses is None:
        eval_poses = make_eval_poses(config.truth, config.board, config.eval_pose_count, config.eval_seed)
    truth = config.truth
    noise_rng = np.random.default_rng([seed, 1])
    strat_rng = np.random.default_rng([seed, 2])

    session = Session(SessionConfig(
        board=config.board,
        image_width=truth.width,
        image_height=truth.height,
        z_preset=config.z_preset,
        seed=seed,
        frame_cap=config.frames_cap,
        select="search" if strategy.kind == "search" else "generated",
        loss=strategy.loss,
        initial_source=strategy.initial,
        stop_on_convergence=config.stop_on_convergence,
        sa=dict(config.sa),
    ))

    series = MetricSeries()

    def record() -> None:
        est = session.estimate
        series.record(len(session.frames), sum_iod(est), abs_rms_err(est, truth, eval_poses, config.board))

    startup_frame = simulate_detection(session.startup_target, truth, config.board, config.noise, noise_rng)
    session.observe_startup(startup_frame)
    session.confirm_startup()
    record()

    def random_visible() -> Pose:
        return sample_visible_pose(
            strat_rng, truth.intrinsics, truth.distortion, config.board, truth.width, truth.height,
        )

    while session.phase is SessionPhase.COLLECTING and len(session.frames) < config.frames_cap:
        if strategy.kind == "random":
            target = random_visible()
        else:
            target = session.next_target().target
        try:
            frame = simulate_detection(target, truth, config.board, config.noise, noise_rng)
        except InvisiblePoseError:
            # The target was selected against the current estimate; under the
            # true camera it can fall outside the image early on.  Realize a
            # random visible pose instead.
            frame = simulate_detection(random_visible(), truth, config.board, config.noise, noise_rng)
        for _ in range(5):
            try:
                session.capture(frame)
                break
            except CamcalError:
                # Degenerate recalibration: the session rolled the frame back;
                # realize a different pose instead.
                frame = simulate_detection(random_visible(), truth, config.board, config.noise, noise_rng)
        else:
            raise NoVisibleBoardError("could not capture a usable frame after repeated attempts")
        record()

    return series


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("frames", "mean_sum_iod", "ln_sum_iod", "mean_abs_rms", "ln_abs_rms", "std_abs_rms")


@dataclass
class AggregateTable:
    strategy: str
    frames: list[int]
    mean_sum_iod: list[float]
    mean_abs_rms: list[float]
    std_abs_rms: list[float]

    @property
    def ln_sum_iod(self) -> list[float]:
        return [math.log(v) if v > 0 else math.nan for v in self.mean_sum_iod]

    @property
    def ln_abs_rms(self) -> list[float]:
        return [math.log(v) if v > 0 else math.nan for v in self.mean_abs_rms]

    def rows(self):
        for i in range(len(self.frames)):
            yield (
                self.frames[i],
                self.mean_sum_iod[i],
                self.ln_sum_iod[i],
                self.mean_abs_rms[i],
                self.ln_abs_rms[i],
                self.std_abs_rms[i],
            )


def aggregate_runs(strategy: str, runs: list[MetricSeries]) -> AggregateTable:
    """Mean/std across repetitions per frame count.  Early-converged runs are
    padded by carrying their last value forward (the estimate is frozen)."""
    length = max(len(r.frames) for r in runs)
    iod = np.full((len(runs), length), np.nan)
    rms = np.full((len(runs), length), np.nan)
    for i, r in enumerate(runs):
        n = len(r.frames)
        iod[i, :n] = r.sum_iod
        rms[i, :n] = r.abs_rms
        if n < length:
            iod[i, n:] = r.sum_iod[-1]
            rms[i, n:] = r.abs_rms[-1]
    return AggregateTable(
        strategy=strategy,
        frames=list(range(1, length + 1)),
        mean_sum_iod=[float(v) for v in iod.mean(axis=0)],
        mean_abs_rms=[float(v) for v in rms.mean(axis=0)],
        std_abs_rms=[float(v) for v in rms.std(axis=0)],
    )


def _session_task(args):
    config_dict, strategy_dict, seed = args
    config = ExperimentConfig.from_dict(config_dict)
    return run_session(config, StrategySpec.parse(strategy_dict), seed)


@dataclass
class ExperimentResult:
    tables: dict
    summary: dict


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Run every configured strategy for ``repetitions`` seeded sessions,
    aggregate, and optionally emit one CSV per strategy plus summary.json."""
    specs = config.strategy_specs()
    eval_poses = make_eval_poses(config.truth, config.board, config.eval_pose_count, config.eval_seed)

    runs: dict[str, list[MetricSeries]] = {s.name: [None] * config.repetitions for s in specs}
    if jobs > 1:
        tasks = [
            (config.to_dict(), s.to_dict(), config.base_seed + rep)
            for s in specs
            for rep in range(config.repetitions)
        ]
        # Workers are spawned (not forked): forking a process whose BLAS has
        # already spun up threads can deadlock the child inside the first
        # factorization.  The problems here are tiny, so single-threaded
        # BLAS in the workers is also the faster configuration.
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            results = list(pool.map(_session_task, tasks))
        k = 0
        for s in specs:
            for rep in range(config.repetitions):
                runs[s.name][rep] = results[k]
                k += 1
    else:
        for s in specs:
            for rep in range(config.repetitions):
                runs[s.name][rep] = run_session(config, s, config.base_seed + rep, eval_poses)

    tables = {s.name: aggregate_runs(s.name, runs[s.name]) for s in specs}
    summary = build_summary(config, tables)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, table in tables.items():
            write_table_csv(table, out / f"{name}.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")

    return ExperimentResult(tables=tables, summary=summary)


def write_table_csv(table: AggregateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in table.rows():
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def build_summary(config: ExperimentConfig, tables: dict) -> dict:
    finals = {
        name: {
            "final_sum_iod": t.mean_sum_iod[-1],
            "final_abs_rms": t.mean_abs_rms[-1],
            "final_abs_rms_std": t.std_abs_rms[-1],
        }
        for name, t in tables.items()
    }
    comparisons = {}

    def final(name, key):
        return finals[name][key]

    if {"search_sum_iod", "random"} <= finals.keys():
        comparisons["search_vs_random"] = {
            "abs_rms": [final("search_sum_iod", "final_abs_rms"), final("random", "final_abs_rms")],
            "sum_iod": [final("search_sum_iod", "final_sum_iod"), final("random", "final_sum_iod")],
            "search_lower_abs_rms": final("search_sum_iod", "final_abs_rms") < final("random", "final_abs_rms"),
            "search_lower_sum_iod": final("search_sum_iod", "final_sum_iod") < final("random", "final_sum_iod"),
        }
    if {"search_rms_err", "search_sum_iod"} <= finals.keys():
        comparisons["loss_rms_vs_iod"] = {
            "abs_rms": [final("search_rms_err", "final_abs_rms"), final("search_sum_iod", "final_abs_rms")],
            "abs_rms_std": [final("search_rms_err", "final_abs_rms_std"), final("search_sum_iod", "final_abs_rms_std")],
        }
    if {"search_rms_err_random_init", "search_rms_err"} <= finals.keys():
        comparisons["initial_random_vs_generated"] = {
            "abs_rms": [
                final("search_rms_err_random_init", "final_abs_rms"),
                final("search_rms_err", "final_abs_rms"),
            ],
            "generated_initial_lower": final("search_rms_err", "final_abs_rms")
            < final("search_rms_err_random_init", "final_abs_rms"),
        }
    if {"search_sum_iod", "generated"} <= finals.keys():
        t_search = tables["search_sum_iod"]
        t_gen = tables["generated"]
        per_frame = [
            {"frames": f, "search": s, "generated": g, "search_leq": s <= g}
            for f, s, g in zip(t_search.frames, t_search.mean_abs_rms, t_gen.mean_abs_rms)
        ]
        comparisons["search_vs_generated"] = {
            "abs_rms": [final("search_sum_iod", "final_abs_rms"), final("generated", "final_abs_rms")],
            "per_frame_abs_rms": per_frame,
            "search_leq_generated_after_5": all(row["search_leq"] for row in per_frame if row["frames"] > 5),
        }

    return {
        "config": config.to_dict(),
        "strategies": finals,
        "comparisons": comparisons,
    }
