"""Simulated-annealing pose search.

A candidate pose is scored by "hypothetical calibration": the board is
projected through the *current* estimate at that pose (noise-free), the
synthetic frame is appended to the captured set, a fast calibration is run,
and the summed dispersion index of the nine camera parameters is the loss.
Lower means the pose adds more constraining information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibration import (
    CalibrationConfig,
    CalibrationEstimate,
    DetectedFrame,
    FAST_ITERATIONS,
    calibrate,
)
from .errors import CamcalError, InvisiblePoseError
from .geometry import BoardSpec, Pose, project_board
from .posegen import IOD_VALUE_GUARD


@dataclass(frozen=True)
class SAConfig:
    """Annealing schedule plus neighbor-move scales and solution-space bounds."""

    t0: float = 1.0
    t_min: float = 0.1
    cooling: float = 0.7
    iters_per_temp: int = 10
    sigma_rot_deg: float = 10.0
    sigma_trans_mm: float = 100.0
    rot_bound_deg: float = 70.0
    zt_min: float = 300.0
    zt_max: float = 3000.0

    def __post_init__(self) -> None:
        if not (0.0 < self.cooling < 1.0):
            raise ValueError("cooling coefficient must be in (0, 1)")
        if not (self.t_min < self.t0):
            raise ValueError("termination temperature must be below the initial temperature")
        if self.iters_per_temp < 1:
            raise ValueError("iters_per_temp must be >= 1")

    @classmethod
    def for_distance(cls, z: float, **overrides) -> "SAConfig":
        """Defaults scaled to the working distance: translation moves of
        0.1*z and depth bounds [0.3*z, 3*z]."""
        base = dict(sigma_trans_mm=0.1 * z, zt_min=0.3 * z, zt_max=3.0 * z)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "t0": self.t0,
            "t_min": self.t_min,
            "cooling": self.cooling,
            "iters_per_temp": self.iters_per_temp,
            "sigma_rot_deg": self.sigma_rot_deg,
            "sigma_trans_mm": self.sigma_trans_mm,
            "rot_bound_deg": self.rot_bound_deg,
            "zt_min": self.zt_min,
            "zt_max": self.zt_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SAConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class HypotheticalContext:
    """Read-only snapshot the loss functions evaluate candidate poses against."""

    frames: tuple[DetectedFrame, ...]
    estimate: CalibrationEstimate
    board: BoardSpec
    image_width: int
    image_height: int
    margin: float = 10.0
    fast_iterations: int = FAST_ITERATIONS

    def visible(self, pose: Pose) -> bool:
        return project_board(
            self.board, pose, self.estimate.intrinsics, self.estimate.distortion,
            self.image_width, self.image_height, margin=self.margin,
        ).visible


def iod(variance: float, value: float) -> float:
    """Dispersion index sigma^2 / |C|, guarded against near-zero values."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    return variance / max(abs(value), IOD_VALUE_GUARD)


def sum_iod(estimate: CalibrationEstimate) -> float:
    values = estimate.param_values()
    return float(sum(iod(v, c) for v, c in zip(estimate.param_variance, values)))


def max_iod(estimate: CalibrationEstimate) -> float:
    values = estimate.param_values()
    return float(max(iod(v, c) for v, c in zip(estimate.param_variance, values)))


def synthesize_frame(ctx: HypotheticalContext, pose: Pose) -> DetectedFrame:
    """Noise-free detection of the board at ``pose`` through the current estimate."""
    bp = project_board(
        ctx.board, pose, ctx.estimate.intrinsics, ctx.estimate.distortion,
        ctx.image_width, ctx.image_height, margin=ctx.margin,
    )
    if not bp.visible:
        raise InvisiblePoseError(f"board not fully visible at {pose}")
    return DetectedFrame(ids=bp.ids, pixels=bp.pixels, board=ctx.board)


def hypothetical_estimate(pose: Pose, ctx: HypotheticalContext) -> CalibrationEstimate:
    """Fast calibration of captured frames plus a synthetic frame at ``pose``.

    Deliberately cold-started, exactly like the recalibration that follows a
    real capture: the loss must rank poses by what that refit will see.
    """
    synth = synthesize_frame(ctx, pose)
    config = CalibrationConfig(
        image_width=ctx.image_width,
        image_height=ctx.image_height,
        model="auto",
        max_iterations=ctx.fast_iterations,
    )
    return calibrate(list(ctx.frames) + [synth], config)


def cost(pose: Pose, ctx: HypotheticalContext) -> float:
    """SumIOD of the hypothetical calibration; infinite when calibration fails.

    Raises InvisiblePoseError when the board would leave the image; callers
    treat that as infinite cost too.
    """
    try:
        est = hypothetical_estimate(pose, ctx)
    except InvisiblePoseError:
        raise
    except CamcalError:
        return math.inf
    return sum_iod(est)


def rms_err_loss(pose: Pose, ctx: HypotheticalContext) -> float:
    """Alternate annealing loss: the hypothetical calibration's training RMS."""
    try:
        est = hypothetical_estimate(pose, ctx)
    except InvisiblePoseError:
        raise
    except CamcalError:
        return math.inf
    return float(est.rms)


def max_iod_loss(pose: Pose, ctx: HypotheticalContext) -> float:
    """Alternate annealing loss: the largest single-parameter dispersion index."""
    try:
        est = hypothetical_estimate(pose, ctx)
    except InvisiblePoseError:
        raise
    except CamcalError:
        return math.inf
    return max_iod(est)


LOSS_FUNCTIONS = {
    "sum_iod": cost,
    "rms_err": rms_err_loss,
    "max_iod": max_iod_loss,
}


def neighbor(pose: Pose, config: SAConfig, rng: np.random.Generator, visible=None):
    """Gaussian move of one uniformly chosen pose component.

    Rotations are clamped into the search box, depth into [zt_min, zt_max].
    When a visibility predicate is given, invisible candidates are
    re-sampled up to 20 times; if all fail the input pose is returned with
    the stuck flag set.
    """
    sigma_rot = math.radians(config.sigma_rot_deg)
    bound = math.radians(config.rot_bound_deg)
    for _ in range(20):
        comp = int(rng.integers(6))
        values = pose.as_array()
        if comp < 3:
            values[comp] = min(max(rng.normal(values[comp], sigma_rot), -bound), bound)
        else:
            values[comp] = rng.normal(values[comp], config.sigma_trans_mm)
            if comp == 5:
                values[5] = min(max(values[5], config.zt_min), config.zt_max)
        cand = Pose.from_array(values)
        if visible is None or visible(cand):
            return cand, False
    return pose, True


def accept(e_new: float, e_old: float, temperature: float, rng: np.random.Generator) -> bool:
    """Metropolis rule: certain acceptance on improvement, e^(-dE/T) otherwise."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    delta = e_new - e_old
    if delta < 0:
        return True
    p = math.exp(-delta / temperature) if math.isfinite(delta) else (0.0 if delta > 0 else math.nan)
    return bool(rng.random() < p)


@dataclass(frozen=True)
class SearchResult:
    pose: Pose
    cost: float
    initial_cost: float
    evaluations: int
    rounds: int
    stuck_moves: int


def search(
    initial: Pose,
    ctx: HypotheticalContext | None,
    config: SAConfig,
    rng: np.random.Generator,
    loss=cost,
) -> SearchResult:
    """Anneal from ``initial`` and return the best pose evaluated.

    The loop structure is fixed by the schedule: with the default config it
    runs 7 temperature rounds of 10 candidate evaluations each.  Beyond the
    70 candidate evaluations, the initial solution is evaluated once to seed
    the Metropolis comparison and the best-so-far tracking, which guarantees
    cost(result) <= cost(initial).
    """
    visible = ctx.visible if ctx is not None else None
    current = initial
    current_cost = loss(initial, ctx)
    initial_cost = current_cost
    best, best_cost = current, current_cost

    temperature = config.t0
    rounds = 0
    evaluations = 0
    stuck = 0
    while temperature > config.t_min:
        rounds += 1
        for _ in range(config.iters_per_temp):
            cand, was_stuck = neighbor(current, config, rng, visible)
            stuck += was_stuck
            try:
                cand_cost = loss(cand, ctx)
            except InvisiblePoseError:
                cand_cost = math.inf
            evaluations += 1
            if cand_cost < best_cost:
                best, best_cost = cand, cand_cost
            if accept(cand_cost, current_cost, temperature, rng):
                current, current_cost = cand, cand_cost
        temperature *= config.cooling

    return SearchResult(
        pose=best,
        cost=best_cost,
        initial_cost=initial_cost,
        evaluations=evaluations,
        rounds=rounds,
        stuck_moves=stuck,
    )
