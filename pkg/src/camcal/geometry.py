"""Camera model, board model and projection math.

Conventions used throughout the package:

- Rotations are parameterized by Euler angles (xr, yr, zr) in radians with
  the fixed-axis composition R = Rz(zr) @ Ry(yr) @ Rx(xr).  Zeroing trailing
  angles therefore yields the intermediate poses of the step-by-step
  guidance decomposition directly.
- Translations are in millimeters, board frame -> camera frame, camera
  looking down +Z (depth must be positive for a point to be imaged).
- Normalized image coordinates are (X/Z, Y/Z) in the camera frame; the
  distortion model acts on those, the intrinsic matrix maps them to pixels.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import BehindCameraError, NonConvergenceError

GIMBAL_LOCK_EPS = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsic parameters (pixels). ``gamma`` is the skew term."""

    alpha: float
    beta: float
    u0: float
    v0: float
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"focal scales must be positive, got alpha={self.alpha}, beta={self.beta}")
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.u0, self.v0, self.gamma)):
            raise ValueError("intrinsic parameters must be finite")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.alpha, self.gamma, self.u0],
                [0.0, self.beta, self.v0],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Distortion:
    """Radial (k1,k2,k3) and tangential (p1,p2) coefficients on normalized coords."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("distortion coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2])

    @classmethod
    def from_array(cls, a) -> "Distortion":
        k1, k2, k3, p1, p2 = (float(v) for v in a)
        return cls(k1, k2, k3, p1, p2)

    def is_zero(self) -> bool:
        return not np.any(self.as_array())


@dataclass(frozen=True)
class Pose:
    """Board placement: Euler rotation (radians) + translation (mm), board -> camera."""

    xr: float
    yr: float
    zr: float
    xt: float
    yt: float
    zt: float

    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.xr, self.yr, self.zr)

    def translation(self) -> np.ndarray:
        return np.array([self.xt, self.yt, self.zt])

    def as_array(self) -> np.ndarray:
        return np.array([self.xr, self.yr, self.zr, self.xt, self.yt, self.zt])

    @classmethod
    def from_array(cls, a) -> "Pose":
        xr, yr, zr, xt, yt, zt = (float(v) for v in a)
        return cls(xr, yr, zr, xt, yt, zt)

    def replace(self, **changes) -> "Pose":
        return replace(self, **changes)

    def rotation_degrees(self) -> tuple[float, float, float]:
        return (math.degrees(self.xr), math.degrees(self.yr), math.degrees(self.zr))

    @classmethod
    def from_degrees(cls, xr_deg, yr_deg, zr_deg, xt, yt, zt) -> "Pose":
        return cls(
            math.radians(xr_deg), math.radians(yr_deg), math.radians(zr_deg),
            float(xt), float(yt), float(zt),
        )


@dataclass(frozen=True)
class BoardSpec:
    """Planar calibration board: a cols x rows grid of squares of edge ``square_size`` mm.

    Interior corners carry ids 0..(cols-1)(rows-1)-1 in row-major order; their
    3D coordinates lie in the Z=0 plane with the origin at the board center.
    """

    cols: int = 9
    rows: int = 6
    square_size: float = 28.0

    def __post_init__(self) -> None:
        if self.cols < 2 or self.rows < 2 or self.square_size <= 0:
            raise ValueError("board needs at least 2x2 squares and a positive square size")

    @property
    def corner_count(self) -> int:
        return (self.cols - 1) * (self.rows - 1)

    def corner_points(self) -> np.ndarray:
        """(N, 3) interior-corner coordinates in mm, row-major by corner id.

        The returned array is cached and read-only.
        """
        return _corner_points_cached(self.cols, self.rows, self.square_size)

    def outline_points(self) -> np.ndarray:
        """(4, 3) physical board outline corners, counter-clockwise from (-x,-y)."""
        hw = self.cols * self.square_size / 2.0
        hh = self.rows * self.square_size / 2.0
        return np.array(
            [
                [-hw, -hh, 0.0],
                [hw, -hh, 0.0],
                [hw, hh, 0.0],
                [-hw, hh, 0.0],
            ]
        )

    def to_dict(self) -> dict:
        return {"cols": self.cols, "rows": self.rows, "square_size": self.square_size}

    @classmethod
    def from_dict(cls, d: dict) -> "BoardSpec":
        return cls(int(d["cols"]), int(d["rows"]), float(d["square_size"]))


@functools.lru_cache(maxsize=32)
def _corner_points_cached(cols: int, rows: int, square_size: float) -> np.ndarray:
    nx, ny = cols - 1, rows - 1
    xs = (np.arange(nx) - (nx - 1) / 2.0) * square_size
    ys = (np.arange(ny) - (ny - 1) / 2.0) * square_size
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)])
    pts.flags.writeable = False
    return pts


@dataclass(frozen=True)
class CameraTruth:
    """Ground-truth camera used by the simulator."""

    intrinsics: Intrinsics
    distortion: Distortion
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


class EulerAngles(NamedTuple):
    xr: float
    yr: float
    zr: float
    gimbal_lock: bool = False


def euler_to_rotation(xr: float, yr: float, zr: float) -> np.ndarray:
    """Compose R = Rz(zr) @ Ry(yr) @ Rx(xr)."""
    cx, sx = math.cos(xr), math.sin(xr)
    cy, sy = math.cos(yr), math.sin(yr)
    cz, sz = math.cos(zr), math.sin(zr)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    )


def rotation_to_euler(R: np.ndarray) -> EulerAngles:
    """Invert :func:`euler_to_rotation`.

    Returns yr in (-pi/2, pi/2) when non-degenerate.  Near the yr = +-pi/2
    singularity (|R[2,0]| >= 1 - 1e-9) only xr - zr (resp. xr + zr) is
    determined; zr is set to 0 and the gimbal_lock flag raised.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
        raise ValueError("matrix is not orthonormal within 1e-9")

    if abs(R[2, 0]) >= 1.0 - GIMBAL_LOCK_EPS:
        if R[2, 0] <= -(1.0 - GIMBAL_LOCK_EPS):  # yr = +pi/2
            yr = math.pi / 2.0
            xr = math.atan2(R[0, 1], R[0, 2])
        else:  # yr = -pi/2
            yr = -math.pi / 2.0
            xr = math.atan2(-R[0, 1], -R[0, 2])
        return EulerAngles(xr, yr, 0.0, True)

    yr = math.asin(-R[2, 0])
    xr = math.atan2(R[2, 1], R[2, 2])
    zr = math.atan2(R[1, 0], R[0, 0])
    return EulerAngles(xr, yr, zr, False)


def distort(x, y, dist: Distortion):
    """Apply the radial + tangential model to normalized coordinates.

    Accepts scalars or same-shape arrays; returns the distorted pair.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y
    if xd.ndim == 0:
        return float(xd), float(yd)
    return xd, yd


def undistort(xd: float, yd: float, dist: Distortion, tol: float = 1e-8, max_iter: int = 50):
    """Numerically invert :func:`distort` by fixed-point iteration.

    Raises NonConvergenceError when the point lies outside the invertible
    region (the iteration diverges or stalls above ``tol``).
    """
    x, y = float(xd), float(yd)
    for _ in range(max_iter):
        if not (math.isfinite(x) and math.isfinite(y)):
            raise NonConvergenceError(f"undistort diverged at ({xd}, {yd})")
        with np.errstate(over="ignore", invalid="ignore"):
            fx, fy = distort(x, y, dist)
        ex, ey = fx - xd, fy - yd
        if not (math.isfinite(ex) and math.isfinite(ey)):
            raise NonConvergenceError(f"undistort diverged at ({xd}, {yd})")
        if abs(ex) <= tol and abs(ey) <= tol:
            return x, y
        x -= ex
        y -= ey
    raise NonConvergenceError(f"undistort did not converge within {max_iter} iterations at ({xd}, {yd})")


def project_points(points: np.ndarray, pose: Pose, intr: Intrinsics, dist: Distortion):
    """Vectorized projection of (N, 3) board points; returns ((N, 2) pixels, (N,) depths).

    Does not test depth sign; callers needing the behind-camera guard use
    :func:`project` or check the returned depths.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cam = pts @ pose.rotation().T + pose.translation()
    z = cam[:, 2]
    x = cam[:, 0] / z
    y = cam[:, 1] / z
    xd, yd = distort(x, y, dist)
    u = intr.alpha * xd + intr.gamma * yd + intr.u0
    v = intr.beta * yd + intr.v0
    return np.column_stack([u, v]), z


def project(point, pose: Pose, intr: Intrinsics, dist: Distortion) -> tuple[float, float]:
    """Project a single 3D point (mm) to pixel coordinates."""
    uv, z = project_points(np.asarray(point, dtype=float).reshape(1, 3), pose, intr, dist)
    if z[0] <= 0:
        raise BehindCameraError(f"point {tuple(point)} has camera depth {z[0]:.3f} <= 0")
    return float(uv[0, 0]), float(uv[0, 1])


@dataclass(frozen=True)
class BoardProjection:
    """All board corners projected for one pose, plus the full-visibility flag."""

    ids: np.ndarray
    pixels: np.ndarray
    visible: bool


def project_board(
    board: BoardSpec,
    pose: Pose,
    intr: Intrinsics,
    dist: Distortion,
    width: int,
    height: int,
    margin: float = 10.0,
) -> BoardProjection:
    """Project every interior corner; visible iff all depths > 0 and all pixels
    lie within [margin, W-margin] x [margin, H-margin]."""
    pts = board.corner_points()
    uv, z = project_points(pts, pose, intr, dist)
    in_front = bool(np.all(z > 0))
    in_bounds = bool(
        np.all(uv[:, 0] >= margin)
        and np.all(uv[:, 0] <= width - margin)
        and np.all(uv[:, 1] >= margin)
        and np.all(uv[:, 1] <= height - margin)
    )
    return BoardProjection(
        ids=np.arange(board.corner_count),
        pixels=uv,
        visible=in_front and in_bounds,
    )


def decompose_pose(p: Pose) -> list[Pose]:
    """Split a pose into the four guidance steps: translate, then rotate about
    X, then Y, then Z.  The last step equals the input exactly."""
    return [
        Pose(0.0, 0.0, 0.0, p.xt, p.yt, p.zt),
        Pose(p.xr, 0.0, 0.0, p.xt, p.yt, p.zt),
        Pose(p.xr, p.yr, 0.0, p.xt, p.yt, p.zt),
        Pose(p.xr, p.yr, p.zr, p.xt, p.yt, p.zt),
    ]
