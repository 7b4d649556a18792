"""Interactive calibration session state machine.

Phases run strictly STARTUP -> COLLECTING -> CONVERGED.  During startup a
restricted single-image model (principal point at the image center, no
distortion) is fitted to every incoming frame and the best kept; once the
user confirms, the session loops: pick the most uncertain parameter,
generate an initial pose for it, anneal to the target, decompose the target
into four guidance steps, gate the capture on a pose match, recalibrate,
and test per-parameter convergence of the variances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .calibration import (
    CalibrationConfig,
    CalibrationEstimate,
    DetectedFrame,
    PARAM_NAMES,
    calibrate,
)
from .errors import CamcalError, DetectionTooSparseError, NoVisibleBoardError
from .geometry import BoardSpec, Pose, decompose_pose, project_points
from .posegen import (
    AngleSequence,
    DistortionMap,
    distortion_map,
    generate_pose_K,
    max_distortion_window,
    next_target_param,
    param_group,
    pose_for_window,
)
from .search import LOSS_FUNCTIONS, HypotheticalContext, SAConfig, search

logger = logging.getLogger(__name__)


class SessionPhase(str, Enum):
    STARTUP = "startup"
    COLLECTING = "collecting"
    CONVERGED = "converged"


# ---------------------------------------------------------------------------
# Guidance payload
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instruction:
    kind: str  # "translate" | "rotate"
    axis: str  # "x" | "y" | "z" | "xyz"
    amount: tuple  # (mm, mm, mm) for translate, (degrees,) for rotate
    direction: str  # "positive" | "negative" | "none"
    text: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "axis": self.axis,
            "amount": list(self.amount),
            "direction": self.direction,
            "text": self.text,
        }


@dataclass(frozen=True, eq=False)
class GuidanceStep:
    pose: Pose
    outline_px: np.ndarray
    corners_px: np.ndarray
    instruction: Instruction

    def to_dict(self) -> dict:
        return {
            "pose": pose_to_dict(self.pose),
            "outline": self.outline_px.tolist(),
            "corners": self.corners_px.tolist(),
            "instruction": self.instruction.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class GuidancePayload:
    target: Pose
    steps: tuple[GuidanceStep, ...]

    def to_dict(self) -> dict:
        return {
            "target": pose_to_dict(self.target),
            "steps": [s.to_dict() for s in self.steps],
        }


def pose_to_dict(p: Pose) -> dict:
    xr, yr, zr = p.rotation_degrees()
    return {"xr": xr, "yr": yr, "zr": zr, "xt": p.xt, "yt": p.yt, "zt": p.zt}


def pose_from_dict(d: dict) -> Pose:
    return Pose.from_degrees(d["xr"], d["yr"], d["zr"], d["xt"], d["yt"], d["zt"])


def rotation_instruction(axis: str, radians: float) -> Instruction:
    degrees = math.degrees(radians)
    if degrees == 0.0:
        return Instruction(
            kind="rotate", axis=axis, amount=(0.0,), direction="none",
            text=f"no rotation around the {axis.upper()} axis",
        )
    direction = "positive" if degrees > 0 else "negative"
    return Instruction(
        kind="rotate", axis=axis, amount=(degrees,), direction=direction,
        text=(
            f"rotate {abs(degrees):g} degrees around the {direction} half axis "
            f"of the {axis.upper()} axis"
        ),
    )


def translation_instruction(p: Pose) -> Instruction:
    return Instruction(
        kind="translate", axis="xyz", amount=(p.xt, p.yt, p.zt), direction="none",
        text=f"translate the board to ({p.xt:g}, {p.yt:g}, {p.zt:g}) mm",
    )


def build_guidance(target: Pose, estimate: CalibrationEstimate, board: BoardSpec) -> GuidancePayload:
    """Decompose the target and project each step once (lazy loading: the
    payload is computed per target, never per displayed frame)."""
    steps = []
    corners3 = board.corner_points()
    outline3 = board.outline_points()
    step_poses = decompose_pose(target)
    instructions = [
        translation_instruction(step_poses[0]),
        rotation_instruction("x", target.xr),
        rotation_instruction("y", target.yr),
        rotation_instruction("z", target.zr),
    ]
    for pose, instruction in zip(step_poses, instructions):
        corners_px, _ = project_points(corners3, pose, estimate.intrinsics, estimate.distortion)
        outline_px, _ = project_points(outline3, pose, estimate.intrinsics, estimate.distortion)
        steps.append(GuidanceStep(pose=pose, outline_px=outline_px, corners_px=corners_px, instruction=instruction))
    return GuidancePayload(target=target, steps=tuple(steps))


# ---------------------------------------------------------------------------
# Pose matching (capture gate)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComponentMatch:
    delta: float
    tolerance: float
    ok: bool


@dataclass(frozen=True)
class MatchReport:
    components: dict
    matched: bool

    def to_dict(self) -> dict:
        return {
            "matched": self.matched,
            "components": {
                k: {"delta": c.delta, "tolerance": c.tolerance, "ok": c.ok}
                for k, c in self.components.items()
            },
        }


def pose_match(current: Pose, target: Pose, rot_tol_deg: float = 3.0, trans_tol_mm: float = 50.0) -> MatchReport:
    """Per-component |delta| against tolerance; matched iff every component passes."""
    comps = {}
    for name in ("xr", "yr", "zr"):
        delta = abs(math.degrees(getattr(current, name) - getattr(target, name)))
        comps[name] = ComponentMatch(delta, rot_tol_deg, delta <= rot_tol_deg)
    for name in ("xt", "yt", "zt"):
        delta = abs(getattr(current, name) - getattr(target, name))
        comps[name] = ComponentMatch(delta, trans_tol_mm, delta <= trans_tol_mm)
    return MatchReport(comps, all(c.ok for c in comps.values()))


# ---------------------------------------------------------------------------
# Convergence (variance-ratio test)
# ---------------------------------------------------------------------------

class ConvergenceState:
    """Tracks per-parameter variance ratios r = var_new / var_prev and flags
    a parameter converged when 1 - r <= threshold.  Applied literally: an
    increased variance (r > 1) also flags converged; the oddity is logged."""

    def __init__(self, threshold: float = 0.1) -> None:
        self.threshold = threshold
        self.previous = None
        self.current = None
        self.ratios = None
        self.flags = np.zeros(len(PARAM_NAMES), dtype=bool)

    def update(self, variances) -> None:
        v = np.asarray(variances, dtype=float).copy()
        self.previous, self.current = self.current, v
        if self.previous is None:
            self.ratios = None
            self.flags = np.zeros(len(PARAM_NAMES), dtype=bool)
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.current / self.previous
        r = np.where(np.isnan(r), 1.0, r)  # 0/0: unchanged
        self.ratios = r
        self.flags = (1.0 - r) <= self.threshold
        grew = np.flatnonzero(r > 1.0)
        if grew.size:
            logger.debug(
                "variance increased for %s (ratio test still flags converged)",
                [PARAM_NAMES[i] for i in grew],
            )

    @property
    def converged(self) -> bool:
        return self.ratios is not None and bool(self.flags.all())

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "flags": [bool(f) for f in self.flags],
            "ratios": None if self.ratios is None else [float(r) for r in self.ratios],
        }


# ---------------------------------------------------------------------------
# Startup
# ---------------------------------------------------------------------------

class StartupTracker:
    """Keeps the restricted-model estimate with the lowest reprojection error
    over a stream of candidate frames."""

    def __init__(self, board: BoardSpec, image_width: int, image_height: int, margin: float = 10.0) -> None:
        self.board = board
        self.image_width = image_width
        self.image_height = image_height
        self.margin = margin
        self.best_frame = None
        self.best_estimate = None

    def observe(self, frame: DetectedFrame) -> bool:
        """Returns True when the frame improved the running best."""
        if len(frame) < self.board.corner_count:
            return False  # partially visible board
        px = frame.pixels
        if (
            px[:, 0].min() < self.margin
            or px[:, 0].max() > self.image_width - self.margin
            or px[:, 1].min() < self.margin
            or px[:, 1].max() > self.image_height - self.margin
        ):
            return False
        config = CalibrationConfig(self.image_width, self.image_height, model="restricted")
        try:
            est = calibrate([frame], config)
        except CamcalError:
            return False
        if self.best_estimate is None or est.rms < self.best_estimate.rms:
            self.best_frame = frame
            self.best_estimate = est
            return True
        return False


def startup_init(frames, image_width: int, image_height: int, board: BoardSpec | None = None):
    """Run the keep-best restricted calibration over a stream of frames.

    Returns (z estimate in mm, restricted CalibrationEstimate).  Raises
    NoVisibleBoardError when no frame showed the full board.
    """
    frames = list(frames)
    if board is None:
        board = frames[0].board if frames else BoardSpec()
    tracker = StartupTracker(board, image_width, image_height)
    for f in frames:
        tracker.observe(f)
    if tracker.best_estimate is None:
        raise NoVisibleBoardError("no frame showed a fully visible board")
    z = float(tracker.best_estimate.extrinsics[0].zt)
    return z, tracker.best_estimate


# ---------------------------------------------------------------------------
# The session itself
# ---------------------------------------------------------------------------

STARTUP_TILT_DEG = 45.0


@dataclass
class SessionConfig:
    board: BoardSpec = BoardSpec()
    image_width: int = 1280
    image_height: int = 720
    z_preset: float = 1000.0
    seed: int = 0
    frame_cap: int = 20
    convergence_threshold: float = 0.1
    rot_tol_deg: float = 3.0
    trans_tol_frac: float = 0.05
    select: str = "search"  # "search" | "generated"
    loss: str = "sum_iod"  # "sum_iod" | "rms_err" | "max_iod"
    initial_source: str = "generated"  # "generated" | "random"
    stop_on_convergence: bool = True
    fast_iterations: int = 20
    margin: float = 10.0
    map_cell: int = 16
    sa: dict = field(default_factory=dict)  # overrides for SAConfig.for_distance

    def to_dict(self) -> dict:
        d = {
            "board": self.board.to_dict(),
            "image_width": self.image_width,
            "image_height": self.image_height,
            "z_preset": self.z_preset,
            "seed": self.seed,
            "frame_cap": self.frame_cap,
            "convergence_threshold": self.convergence_threshold,
            "rot_tol_deg": self.rot_tol_deg,
            "trans_tol_frac": self.trans_tol_frac,
            "select": self.select,
            "loss": self.loss,
            "initial_source": self.initial_source,
            "stop_on_convergence": self.stop_on_convergence,
            "fast_iterations": self.fast_iterations,
            "margin": self.margin,
            "map_cell": self.map_cell,
            "sa": dict(self.sa),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        kwargs = dict(d)
        if "board" in kwargs:
            kwargs["board"] = BoardSpec.from_dict(kwargs["board"])
        return cls(**kwargs)


class Session:
    """One interactive calibration run.  Single-threaded by contract: the
    service layer serializes commands per session."""

    def __init__(self, config: SessionConfig) -> None:
        self.config = config
        self.phase = SessionPhase.STARTUP
        self.frames: list[DetectedFrame] = []
        self.estimate: CalibrationEstimate | None = None
        self.z: float | None = None
        self.rng = np.random.default_rng([config.seed, 101])
        self.convergence = ConvergenceState(config.convergence_threshold)
        self.stats = {"payload_computes": 0, "search_failures": 0, "captures": 0}
        self._tracker = StartupTracker(config.board, config.image_width, config.image_height, config.margin)
        self._sequences: dict[str, AngleSequence] = {}
        self._payload: GuidancePayload | None = None
        self._last_window_rect = None
        self._skipped_rects: list = []

    # -- startup ------------------------------------------------------------

    @property
    def startup_target(self) -> Pose:
        return Pose.from_degrees(STARTUP_TILT_DEG, 0.0, 0.0, 0.0, 0.0, self.config.z_preset)

    def observe_startup(self, frame: DetectedFrame) -> bool:
        if self.phase is not SessionPhase.STARTUP:
            raise CamcalError("startup observations only accepted in the startup phase")
        return self._tracker.observe(frame)

    def confirm_startup(self) -> None:
        if self.phase is not SessionPhase.STARTUP:
            raise CamcalError("startup already confirmed")
        if self._tracker.best_estimate is None:
            raise NoVisibleBoardError("no fully visible board seen during startup")
        self.frames.append(self._tracker.best_frame)
        self.estimate = self._tracker.best_estimate
        self.z = float(self.estimate.extrinsics[0].zt)
        self.stats["captures"] += 1
        self.phase = SessionPhase.COLLECTING

    # -- targeting ----------------------------------------------------------

    def sa_config(self) -> SAConfig:
        z = self.z if self.z is not None else self.config.z_preset
        return SAConfig.for_distance(z, **self.config.sa)

    def _context(self) -> HypotheticalContext:
        return HypotheticalContext(
            frames=tuple(self.frames),
            estimate=self.estimate,
            board=self.config.board,
            image_width=self.config.image_width,
            image_height=self.config.image_height,
            margin=self.config.margin,
            fast_iterations=self.config.fast_iterations,
        )

    def _window_size(self) -> tuple[float, float]:
        """Projected board bounding box at the startup distance, frontal."""
        outline3 = self.config.board.outline_points()
        frontal = Pose(0.0, 0.0, 0.0, 0.0, 0.0, self.z or self.config.z_preset)
        uv, _ = project_points(outline3, frontal, self.estimate.intrinsics, self.estimate.distortion)
        w = float(uv[:, 0].max() - uv[:, 0].min())
        h = float(uv[:, 1].max() - uv[:, 1].min())
        return max(w, 1.0), max(h, 1.0)

    def _sample_visible(self, ctx: HypotheticalContext) -> Pose:
        cfg = self.sa_config()
        bound = cfg.rot_bound_deg
        for _ in range(500):
            p = Pose.from_degrees(
                self.rng.uniform(-bound, bound),
                self.rng.uniform(-bound, bound),
                self.rng.uniform(-bound, bound),
                0.0,
                0.0,
                self.rng.uniform(cfg.zt_min, cfg.zt_max),
            )
            zt = p.zt
            p = p.replace(xt=self.rng.uniform(-0.2, 0.2) * zt, yt=self.rng.uniform(-0.2, 0.2) * zt)
            if ctx.visible(p):
                return p
        raise NoVisibleBoardError("could not sample a visible pose under the current estimate")

    def _ensure_visible(self, pose: Pose, ctx: HypotheticalContext) -> Pose:
        if ctx.visible(pose):
            return pose
        cfg = self.sa_config()
        zt = pose.zt
        while zt < cfg.zt_max:
            zt *= 1.25
            cand = pose.replace(zt=min(zt, cfg.zt_max))
            if ctx.visible(cand):
                return cand
        logger.info("generated pose invisible at any depth; sampling a random visible pose")
        return self._sample_visible(ctx)

    def propose_initial(self, ctx: HypotheticalContext) -> Pose:
        """Initial solution for the next target, chosen per parameter group."""
        idx = next_target_param(self.estimate)
        self._last_window_rect = None
        if param_group(idx) == "K":
            initial = generate_pose_K(idx, self._sequences, self.z or self.config.z_preset)
        else:
            dmap = distortion_map(self.estimate, self.config.image_width, self.config.image_height, self.config.map_cell)
            values = dmap.values
            if self._skipped_rects:
                # Regions whose targets proved unreachable are struck from
                # the search so a re-plan lands somewhere new.
                values = values.copy()
                cell = dmap.cell
                for x0, y0, w, h in self._skipped_rects:
                    values[int(y0) // cell : -(-int(y0 + h) // cell), int(x0) // cell : -(-int(x0 + w) // cell)] = 0.0
                dmap = DistortionMap(values=values, cell=cell)
            if values.max() <= 0.0:
                initial = self._sample_visible(ctx)
            else:
                rect = max_distortion_window(dmap, *self._window_size())
                self._last_window_rect = rect
                initial = pose_for_window(rect, self.estimate, self.config.board)
        return self._ensure_visible(initial, ctx)

    def next_target(self) -> GuidancePayload:
        if self.phase is not SessionPhase.COLLECTING:
            raise CamcalError(f"no target in phase {self.phase.value}")
        if self._payload is not None:
            return self._payload

        ctx = self._context()
        if self.config.initial_source == "random":
            initial = self._sample_visible(ctx)
        else:
            initial = self.propose_initial(ctx)

        target = initial
        if self.config.select == "search":
            try:
                result = search(initial, ctx, self.sa_config(), self.rng, loss=LOSS_FUNCTIONS[self.config.loss])
                target = result.pose
            except CamcalError as exc:
                self.stats["search_failures"] += 1
                logger.warning("pose search failed (%s); falling back to the initial solution", exc)

        self._payload = build_guidance(target, self.estimate, self.config.board)
        self.stats["payload_computes"] += 1
        return self._payload

    # -- capture ------------------------------------------------------------

    def capture(self, frame: DetectedFrame) -> None:
        if self.phase is not SessionPhase.COLLECTING:
            raise CamcalError(f"cannot capture in phase {self.phase.value}")
        if len(frame) < 4:
            raise DetectionTooSparseError(f"frame has {len(frame)} corners, need >= 4")
        self.frames.append(frame)
        config = CalibrationConfig(self.config.image_width, self.config.image_height, model="auto")
        try:
            est = calibrate(self.frames, config)
        except CamcalError:
            self.frames.pop()
            raise
        self.estimate = est
        self.stats["captures"] += 1
        if len(self.frames) >= 3:  # variance ratios only meaningful for the full model
            self.convergence.update(est.param_variance)
        self._payload = None  # invalidated exactly once per capture
        self._skipped_rects.clear()  # strike-outs belonged to the previous estimate
        self._last_window_rect = None
        hit_cap = len(self.frames) >= self.config.frame_cap
        settled = self.config.stop_on_convergence and self.convergence.converged
        if hit_cap or settled:
            self.phase = SessionPhase.CONVERGED

    def skip_target(self) -> None:
        """Discard the cached target and plan a fresh one on the next request.

        Escape hatch for targets the session believes visible but the camera
        cannot actually see (the estimate's distortion lags the real lens
        early on); the angle sequence and search RNG advance, so the re-plan
        differs from the discarded target.
        """
        if self.phase is not SessionPhase.COLLECTING:
            raise CamcalError(f"no target to skip in phase {self.phase.value}")
        self._payload = None
        if self._last_window_rect is not None:
            self._skipped_rects.append(self._last_window_rect)
            self._last_window_rect = None
        self.stats["skipped_targets"] = self.stats.get("skipped_targets", 0) + 1

    def match_report(self, current: Pose) -> MatchReport:
        target = self.startup_target if self.phase is SessionPhase.STARTUP else self.next_target().target
        trans_tol = self.config.trans_tol_frac * (self.z if self.z is not None else self.config.z_preset)
        return pose_match(current, target, self.config.rot_tol_deg, trans_tol)

    # -- protocol -----------------------------------------------------------

    def state_dict(self) -> dict:
        est = None
        if self.estimate is not None:
            values = self.estimate.param_values()
            est = {
                "params": {name: float(v) for name, v in zip(PARAM_NAMES, values)},
                "variances": [float(v) for v in self.estimate.param_variance],
                "rms": float(self.estimate.rms),
            }
        return {
            "phase": self.phase.value,
            "frame_count": len(self.frames),
            "estimate": est,
            "convergence": self.convergence.to_dict(),
            "z": self.z,
            "stats": dict(self.stats),
            "startup_target": pose_to_dict(self.startup_target),
            "image_size": [self.config.image_width, self.config.image_height],
            "frame_cap": self.config.frame_cap,
        }
