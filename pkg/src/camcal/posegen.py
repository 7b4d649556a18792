"""Targeted initial-pose generation.

Focal/principal-point targets get tilted poses from a bisection angle
sequence (maximize the spread angle between board and image plane);
distortion targets get a pose that fills the most-distorted image region,
found by a sliding window over a distortion magnitude map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationEstimate, PARAM_NAMES, extrinsics_from_homography, homography_dlt
from .errors import DegenerateConfigurationError
from .geometry import BoardSpec, Pose, distort

K_GROUP = ("alpha", "beta", "u0", "v0")
DELTA_GROUP = ("k1", "k2", "k3", "p1", "p2")

IOD_VALUE_GUARD = 1e-6

ANGLE_FIRST = -70.0
ANGLE_SECOND = 70.0
TILT_ZR = math.pi / 8.0


def param_group(param: int | str) -> str:
    """"K" for focal/principal-point parameters, "delta" for distortion."""
    name = PARAM_NAMES[param] if isinstance(param, int) else param
    if name in K_GROUP:
        return "K"
    if name in DELTA_GROUP:
        return "delta"
    raise ValueError(f"unknown parameter {param!r}")


@dataclass
class AngleSequence:
    """Bisection sequence of tilt angles (degrees): -70, 70, then midpoints."""

    emitted: list[float] = field(default_factory=list)

    def next(self) -> float:
        if not self.emitted:
            theta = ANGLE_FIRST
        elif len(self.emitted) == 1:
            theta = ANGLE_SECOND
        else:
            theta = (self.emitted[-1] + self.emitted[-2]) / 2.0
        self.emitted.append(theta)
        return theta


def next_target_param(estimate: CalibrationEstimate) -> int:
    """Index of the parameter with the largest dispersion index sigma^2/|C|.

    Ties break toward the lowest index.
    """
    values = estimate.param_values()
    scores = estimate.param_variance / np.maximum(np.abs(values), IOD_VALUE_GUARD)
    return int(np.argmax(scores))


def generate_pose_K(target: int | str, sequences: dict[str, AngleSequence], z: float) -> Pose:
    """Tilted pose for a focal/principal-point target at distance z (mm).

    alpha/u0 tilt about the Y axis, beta/v0 about the X axis; the two cases
    keep independent angle counters.  A fixed Z rotation of pi/8 keeps the
    board off the image plane even at the zero-tilt step.
    """
    name = PARAM_NAMES[target] if isinstance(target, int) else target
    if name in ("alpha", "u0"):
        theta = sequences.setdefault("y_tilt", AngleSequence()).next()
        return Pose(0.0, math.radians(theta), TILT_ZR, 0.0, 0.0, float(z))
    if name in ("beta", "v0"):
        theta = sequences.setdefault("x_tilt", AngleSequence()).next()
        return Pose(math.radians(theta), 0.0, TILT_ZR, 0.0, 0.0, float(z))
    raise ValueError(f"{name!r} is not a focal/principal-point parameter")


@dataclass(frozen=True)
class DistortionMap:
    """Displacement magnitude (px) caused by the current distortion estimate,
    sampled at cell centers across the image."""

    values: np.ndarray
    cell: int

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def distortion_map(estimate: CalibrationEstimate, width: int, height: int, cell: int = 16) -> DistortionMap:
    """Per-cell displacement ||K(distort(n)) - K(n)|| with n the cell center
    normalized through the current intrinsics."""
    intr = estimate.intrinsics
    cols = math.ceil(width / cell)
    rows = math.ceil(height / cell)
    u = (np.arange(cols) + 0.5) * cell
    v = (np.arange(rows) + 0.5) * cell
    uu, vv = np.meshgrid(u, v)
    x = (uu - intr.u0) / intr.alpha
    y = (vv - intr.v0) / intr.beta
    xd, yd = distort(x, y, estimate.distortion)
    disp = np.hypot(intr.alpha * (xd - x), intr.beta * (yd - y))
    return DistortionMap(values=disp, cell=cell)


def max_distortion_window(dmap: DistortionMap, window_w: float, window_h: float):
    """Cell-aligned rectangle (x0, y0, w, h) in px maximizing the mean cell
    value; exhaustive over all placements, ties to the top-left-most."""
    cell = dmap.cell
    wc = min(max(1, math.ceil(window_w / cell)), dmap.cols)
    hc = min(max(1, math.ceil(window_h / cell)), dmap.rows)
    v = dmap.values
    # Summed-area table makes every placement O(1).
    sat = np.zeros((dmap.rows + 1, dmap.cols + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(v, axis=0), axis=1)
    sums = (
        sat[hc:, wc:]
        - sat[:-hc or None, wc:][: dmap.rows - hc + 1]
        - sat[hc:, : dmap.cols - wc + 1]
        + sat[: dmap.rows - hc + 1, : dmap.cols - wc + 1]
    )
    idx = int(np.argmax(sums))  # first max in row-major order = top-left-most
    cy, cx = divmod(idx, sums.shape[1])
    return (cx * cell, cy * cell, wc * cell, hc * cell)


def pose_for_window(rect, estimate: CalibrationEstimate, board: BoardSpec) -> Pose:
    """Pose whose board outline projects (pinhole, no distortion) onto the
    rectangle's corners.  Euler angles are clamped into the search box."""
    x0, y0, w, h = rect
    if w <= 0 or h <= 0:
        raise DegenerateConfigurationError(f"window rectangle has zero area: {rect}")
    outline = board.outline_points()[:, :2]
    corners = np.array(
        [
            [x0, y0],
            [x0 + w, y0],
            [x0 + w, y0 + h],
            [x0, y0 + h],
        ],
        dtype=float,
    )
    H = homography_dlt(outline, corners)
    pose = extrinsics_from_homography(H, estimate.intrinsics)
    pose = _polish_outline_fit(pose, outline, corners, estimate.intrinsics)
    bound = math.radians(70.0)
    return Pose(
        min(max(pose.xr, -bound), bound),
        min(max(pose.yr, -bound), bound),
        min(max(pose.zr, -bound), bound),
        pose.xt,
        pose.yt,
        pose.zt,
    )


def _polish_outline_fit(pose: Pose, outline_xy, corners_uv, intr, iterations: int = 15) -> Pose:
    """Gauss-Newton polish of the decomposed pose on the four outline
    correspondences.  The homography is exact but generally not rigid, so the
    nearest-rotation decomposition alone can miss the corners by a few px."""
    from .geometry import Distortion, project_points

    params = pose.as_array()
    pts3 = np.column_stack([outline_xy, np.zeros(len(outline_xy))])
    dist0 = Distortion()
    prev_cost = None
    for _ in range(iterations):
        p = Pose.from_array(params)
        uv, _ = project_points(pts3, p, intr, dist0)
        r = (uv - corners_uv).ravel()
        cost = float(r @ r)
        if prev_cost is not None and prev_cost - cost < 1e-12 * max(prev_cost, 1.0):
            break
        prev_cost = cost
        J = np.zeros((8, 6))
        h = 1e-6
        for j in range(6):
            dp = params.copy()
            dp[j] += h * max(1.0, abs(params[j]))
            uv2, _ = project_points(pts3, Pose.from_array(dp), intr, dist0)
            J[:, j] = ((uv2 - corners_uv).ravel() - r) / (h * max(1.0, abs(params[j])))
        try:
            step = np.linalg.lstsq(J, r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        params = params - step
    return Pose.from_array(params)
