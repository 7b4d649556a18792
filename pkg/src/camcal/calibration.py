"""Planar calibration pipeline: homographies, closed-form intrinsics,
extrinsics recovery, Levenberg-Marquardt refinement and parameter covariance.

Parameter ordering everywhere: (alpha, beta, u0, v0, k1, k2, k3, p1, p2) -
nine intrinsic/distortion parameters - followed by six extrinsic parameters
(xr, yr, zr, xt, yt, zt) per frame.  Skew is held at zero during refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateConfigurationError,
    InsufficientFramesError,
    SingularNormalEquationsError,
    UnobservableParameterError,
)
from .geometry import BoardSpec, Distortion, Intrinsics, Pose, rotation_to_euler

PARAM_NAMES = ("alpha", "beta", "u0", "v0", "k1", "k2", "k3", "p1", "p2")
N_CAMERA_PARAMS = 9

FULL_MASK = np.ones(9, dtype=bool)
# Startup model: principal point pinned to the image center, no distortion.
RESTRICTED_MASK = np.array([True, True, False, False, False, False, False, False, False])

FAST_ITERATIONS = 20


@dataclass(frozen=True, eq=False)
class DetectedFrame:
    """Corner observations of one board view: ids + pixel coordinates."""

    ids: np.ndarray
    pixels: np.ndarray
    board: BoardSpec

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=int)
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if ids.shape[0] != px.shape[0]:
            raise ValueError("ids and pixels must have the same length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("corner ids must be unique within a frame")
        if ids.size and (ids.min() < 0 or ids.max() >= self.board.corner_count):
            raise ValueError("corner id outside the board's id range")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pixels", px)

    def __len__(self) -> int:
        return len(self.ids)

    def object_xy(self) -> np.ndarray:
        """(N, 2) board-plane coordinates matching this frame's corner ids."""
        return self.board.corner_points()[self.ids, :2]

    def to_record(self) -> dict:
        return {
            "board": self.board.to_dict(),
            "observations": [
                {"id": int(i), "u": float(u), "v": float(v)}
                for i, (u, v) in zip(self.ids, self.pixels)
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DetectedFrame":
        obs = rec["observations"]
        return cls(
            ids=np.array([o["id"] for o in obs], dtype=int),
            pixels=np.array([[o["u"], o["v"]] for o in obs], dtype=float),
            board=BoardSpec.from_dict(rec["board"]),
        )


@dataclass(frozen=True, eq=False)
class CalibrationEstimate:
    """Calibration result: camera parameters, per-frame extrinsics,
    per-parameter variances and the training reprojection RMS (px)."""

    intrinsics: Intrinsics
    distortion: Distortion
    extrinsics: tuple[Pose, ...]
    param_variance: np.ndarray
    rms: float
    converged: bool = True

    def param_values(self) -> np.ndarray:
        i, d = self.intrinsics, self.distortion
        return np.array([i.alpha, i.beta, i.u0, i.v0, d.k1, d.k2, d.k3, d.p1, d.p2])


@dataclass(frozen=True)
class CalibrationConfig:
    """Pipeline configuration.  ``model`` is "full", "restricted" or "auto"
    (restricted below 3 frames, full otherwise)."""

    image_width: int
    image_height: int
    model: str = "auto"
    max_iterations: int = 100
    numeric_jacobian: bool = False

    def resolve_model(self, n_frames: int) -> str:
        if self.model == "auto":
            return "full" if n_frames >= 3 else "restricted"
        return self.model


# ---------------------------------------------------------------------------
# Homography estimation (normalized DLT)
# ---------------------------------------------------------------------------

def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pts.mean(axis=0)
    d = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    return (pts - mean) * s, T


def homography_dlt(src_xy: np.ndarray, dst_uv: np.ndarray) -> np.ndarray:
    """Plane-to-plane homography from point correspondences by normalized DLT.

    Returns H with H[2,2] scaled to 1 when that entry is nonzero.
    """
    src = np.asarray(src_xy, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst_uv, dtype=float).reshape(-1, 2)
    n = src.shape[0]
    if n < 4:
        raise DegenerateConfigurationError(f"homography needs >= 4 correspondences, got {n}")
    sn, Ts = _normalize_points(src)
    dn, Td = _normalize_points(dst)
    A = np.zeros((2 * n, 9))
    X, Y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    A[0::2, 0] = -X
    A[0::2, 1] = -Y
    A[0::2, 2] = -1.0
    A[0::2, 6] = u * X
    A[0::2, 7] = u * Y
    A[0::2, 8] = u
    A[1::2, 3] = -X
    A[1::2, 4] = -Y
    A[1::2, 5] = -1.0
    A[1::2, 6] = v * X
    A[1::2, 7] = v * Y
    A[1::2, 8] = v
    _, s, Vt = np.linalg.svd(A)
    # A solvable up to scale needs rank 8: a second vanishing singular value
    # marks a degenerate (collinear) configuration.
    if s[7] < 1e-9 * s[0]:
        raise DegenerateConfigurationError("point configuration is rank-deficient (collinear?)")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def estimate_homography(frame: DetectedFrame) -> np.ndarray:
    """Board-plane -> image homography for one detected frame."""
    return homography_dlt(frame.object_xy(), frame.pixels)


# ---------------------------------------------------------------------------
# Closed-form intrinsics
# ---------------------------------------------------------------------------

def _vij(H: np.ndarray, i: int, j: int) -> np.ndarray:
    return np.array(
        [
            H[0, i] * H[0, j],
            H[0, i] * H[1, j] + H[1, i] * H[0, j],
            H[1, i] * H[1, j],
            H[2, i] * H[0, j] + H[0, i] * H[2, j],
            H[2, i] * H[1, j] + H[1, i] * H[2, j],
            H[2, i] * H[2, j],
        ]
    )


def closed_form_intrinsics(homographies) -> Intrinsics:
    """Recover (alpha, beta, gamma, u0, v0) from >= 3 homographies via the
    absolute-conic constraints.  Raises on mutually parallel poses."""
    hs = list(homographies)
    if len(hs) < 3:
        raise InsufficientFramesError(f"closed form needs >= 3 homographies, got {len(hs)}")
    V = np.zeros((2 * len(hs), 6))
    for k, H in enumerate(hs):
        V[2 * k] = _vij(H, 0, 1)
        V[2 * k + 1] = _vij(H, 0, 0) - _vij(H, 1, 1)
    _, s, Vt = np.linalg.svd(V)
    # b is determined up to scale only when V has rank 5.
    if s[4] < 1e-9 * s[0]:
        raise DegenerateConfigurationError("homographies do not constrain the conic (parallel poses?)")
    b = Vt[-1]
    if b[0] < 0:
        b = -b
    B11, B12, B22, B13, B23, B33 = b
    denom = B11 * B22 - B12 * B12
    if B11 <= 0 or denom <= 0:
        raise DegenerateConfigurationError("recovered conic is not positive definite")
    v0 = (B12 * B13 - B11 * B23) / denom
    lam = B33 - (B13 * B13 + v0 * (B12 * B13 - B11 * B23)) / B11
    if lam <= 0:
        raise DegenerateConfigurationError("recovered conic is not positive definite")
    alpha = math.sqrt(lam / B11)
    beta = math.sqrt(lam * B11 / denom)
    gamma = -B12 * alpha * alpha * beta / lam
    u0 = gamma * v0 / beta - B13 * alpha * alpha / lam
    return Intrinsics(alpha=alpha, beta=beta, u0=u0, v0=v0, gamma=gamma)


def restricted_intrinsics(homographies, u0: float, v0: float) -> Intrinsics:
    """Focal scales from >= 1 homography with the principal point pinned at
    (u0, v0), zero skew and zero distortion.

    The conic constraints reduce to a linear system in (1/alpha^2, 1/beta^2);
    when that system is ill-conditioned (a single-axis tilt leaves one row
    identically zero: the startup pose is exactly such a view) the solve
    falls back to square pixels, alpha = beta = f, which one tilted view
    does determine.
    """
    hs = list(homographies)
    if not hs:
        raise InsufficientFramesError("restricted solve needs at least one homography")
    rows = []
    rhs = []
    for H in hs:
        p = H[0, :] - u0 * H[2, :]
        q = H[1, :] - v0 * H[2, :]
        w = H[2, :]
        rows.append([p[0] * p[1], q[0] * q[1]])
        rhs.append(-w[0] * w[1])
        rows.append([p[0] ** 2 - p[1] ** 2, q[0] ** 2 - q[1] ** 2])
        rhs.append(-(w[0] ** 2 - w[1] ** 2))
    A = np.array(rows)
    y = np.array(rhs)

    ab = None
    # A single view yields one informative constraint at best (single-axis
    # tilts zero out the other row entirely), so the two-unknown solve is
    # only trusted across multiple views.
    if len(hs) >= 2 and np.linalg.cond(A) < 1e6:
        sol, *_ = np.linalg.lstsq(A, y, rcond=None)
        if np.all(np.isfinite(sol)) and sol[0] > 0 and sol[1] > 0:
            ab = (float(sol[0]), float(sol[1]))
    if ab is None:
        s = A.sum(axis=1)
        denom = float(s @ s)
        if denom > 0:
            f2inv = float(s @ y) / denom
            if np.isfinite(f2inv) and f2inv > 0:
                ab = (f2inv, f2inv)
    if ab is None:
        raise DegenerateConfigurationError(
            "restricted solve is degenerate (frontal-parallel view?)"
        )
    return Intrinsics(alpha=1.0 / math.sqrt(ab[0]), beta=1.0 / math.sqrt(ab[1]), u0=u0, v0=v0)


def square_pixel_estimate(frames, u0: float, v0: float,
                          f_starts=(640.0, 1280.0, 2560.0), iterations: int = 60):
    """Tied-focal (alpha = beta = f) pose-and-focal fit by reprojection L-M.

    This is the startup/restricted model's solver.  The algebraic
    (conic-constraint) route reads the focal length out of the homography's
    perspective entries, which strong distortion corrupts by large factors
    even near the image center, and with the distortion unmodeled the
    two-focal problem has spurious minima with one scale run far away;
    fitting a single reprojection-optimal f avoids both.  Multi-start over
    coarse focal priors guards against basin dependence.
    """
    frames = list(frames)
    hs = [estimate_homography(f) for f in frames]
    n = len(frames)
    data = _ReprojectionData(frames)
    zeros5 = np.zeros(5)
    ab_idx = np.array([0, 1])
    candidates = []

    def intr9_of(f):
        return np.concatenate([[max(f, 1.0), max(f, 1.0), u0, v0], zeros5])

    for f0 in f_starts:
        intr = Intrinsics(f0, f0, u0, v0)
        try:
            poses = np.array([extrinsics_from_homography(H, intr).as_array() for H in hs])
        except DegenerateConfigurationError:
            continue
        f = f0
        lam = LM_INITIAL_DAMPING
        cost = None
        for _ in range(iterations):
            # Normal equations over (alpha, beta, extrinsics), then the two
            # focal columns folded into the single tied parameter.
            r, A2, g2 = _normal_equations(data, intr9_of(f), poses, ab_idx)
            cost = float(r @ r)
            d = 1 + 6 * n
            A = np.empty((d, d))
            A[0, 0] = A2[0, 0] + A2[1, 1] + 2.0 * A2[0, 1]
            A[0, 1:] = A2[0, 2:] + A2[1, 2:]
            A[1:, 0] = A[0, 1:]
            A[1:, 1:] = A2[2:, 2:]
            g = np.empty(d)
            g[0] = g2[0] + g2[1]
            g[1:] = g2[2:]
            try:
                step = np.linalg.solve(A + lam * np.diag(np.diag(A)), g)
            except np.linalg.LinAlgError:
                lam *= LM_DAMPING_UP
                if lam > LM_MAX_DAMPING:
                    break
                continue
            new_f = f - step[0]
            new_poses = poses - step[1:].reshape(poses.shape)
            r2, _ = _forward(data, intr9_of(new_f), new_poses, with_jacobian=False)
            new_cost = float(r2 @ r2)
            if new_cost < cost:
                drop = cost - new_cost
                f, poses, cost = new_f, new_poses, new_cost
                lam = max(lam / LM_DAMPING_DOWN, 1e-15)
                if drop < LM_COST_TOL * max(new_cost, 1e-300):
                    break
            else:
                lam *= LM_DAMPING_UP
                if lam > LM_MAX_DAMPING:
                    break
        if cost is not None:
            candidates.append((cost, f, poses.copy()))
    if not candidates:
        raise DegenerateConfigurationError("square-pixel focal estimation failed")
    best = min(candidates, key=lambda c: c[0])
    _, f, poses = best
    f = max(f, 1.0)

    # Observability gates.  Near-frontal views leave f traded off against
    # depth: the starts split across the valley, or the fit lands outside
    # any plausible field of view, or the f-variance (Schur complement of
    # the pose block) blows up.  Weak single-view tilts also read the lens
    # distortion as foreshortening, which only the FOV band catches.
    comparable = [c for c in candidates if c[0] <= 1.3 * best[0] + 1e-12]
    f_values = [max(c[1], 1.0) for c in comparable]
    if max(f_values) - min(f_values) > 0.05 * f:
        raise DegenerateConfigurationError(
            "focal length unobservable from these views (frontal-parallel board?)"
        )
    image_width = 2.0 * u0
    if not (0.3 * image_width <= f <= 3.0 * image_width):
        raise DegenerateConfigurationError(
            f"focal estimate {f:.0f} px outside the plausible field-of-view band"
        )
    r, A2, _ = _normal_equations(data, intr9_of(f), poses, ab_idx)
    d = 1 + 6 * n
    A = np.empty((d, d))
    A[0, 0] = A2[0, 0] + A2[1, 1] + 2.0 * A2[0, 1]
    A[0, 1:] = A2[0, 2:] + A2[1, 2:]
    A[1:, 0] = A[0, 1:]
    A[1:, 1:] = A2[2:, 2:]
    try:
        schur_f = A[0, 0] - A[0, 1:] @ np.linalg.solve(A[1:, 1:], A[1:, 0])
    except np.linalg.LinAlgError:
        schur_f = 0.0
    s2 = max(float(r @ r) / max(r.size - d, 1), 1e-6)
    if schur_f <= 0 or math.sqrt(s2 / schur_f) / f > 0.3:
        raise DegenerateConfigurationError(
            "focal length unobservable from these views (frontal-parallel board?)"
        )
    return (
        Intrinsics(f, f, u0, v0),
        tuple(Pose.from_array(p) for p in poses),
    )


def extrinsics_from_homography(H: np.ndarray, intr: Intrinsics) -> Pose:
    """Recover the board pose from H = K [r1 r2 t], re-orthonormalized to the
    nearest rotation, signed so the board sits in front of the camera."""
    Kinv = np.linalg.inv(intr.matrix())
    r1 = Kinv @ H[:, 0]
    r2 = Kinv @ H[:, 1]
    t = Kinv @ H[:, 2]
    norm = np.linalg.norm(r1)
    if norm < 1e-15:
        raise DegenerateConfigurationError("degenerate homography (zero first column)")
    lam = 1.0 / norm
    r1, r2, t = lam * r1, lam * r2, lam * t
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    r3 = np.cross(r1, r2)
    M = np.column_stack([r1, r2, r3])
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    e = rotation_to_euler(R)
    return Pose(e.xr, e.yr, e.zr, float(t[0]), float(t[1]), float(t[2]))


# ---------------------------------------------------------------------------
# Reprojection residuals and analytic Jacobian
# ---------------------------------------------------------------------------

class _ReprojectionData:
    """Concatenated observations of all frames, for vectorized evaluation."""

    def __init__(self, frames) -> None:
        xs, ys, obs, slices = [], [], [], []
        start = 0
        for f in frames:
            xy = f.object_xy()
            xs.append(xy[:, 0])
            ys.append(xy[:, 1])
            obs.append(f.pixels)
            slices.append((start, start + len(f)))
            start += len(f)
        self.X = np.concatenate(xs)
        self.Y = np.concatenate(ys)
        self.obs = np.vstack(obs)
        self.slices = slices
        self.n_frames = len(slices)
        self.n_points = start
        fidx = np.empty(start, dtype=int)
        for k, (a, b) in enumerate(slices):
            fidx[a:b] = k
        self.fidx = fidx


def _rotation_stacks(poses: np.ndarray):
    """Per-frame rotation matrices and their derivatives wrt each angle.

    poses: (F, 6) rows (xr, yr, zr, xt, yt, zt).  Returns R, dRx, dRy, dRz
    each of shape (F, 3, 3).
    """
    F = poses.shape[0]
    cx, sx = np.cos(poses[:, 0]), np.sin(poses[:, 0])
    cy, sy = np.cos(poses[:, 1]), np.sin(poses[:, 1])
    cz, sz = np.cos(poses[:, 2]), np.sin(poses[:, 2])

    Rx = np.zeros((F, 3, 3))
    Rx[:, 0, 0] = 1.0
    Rx[:, 1, 1] = cx
    Rx[:, 1, 2] = -sx
    Rx[:, 2, 1] = sx
    Rx[:, 2, 2] = cx
    dRxm = np.zeros((F, 3, 3))
    dRxm[:, 1, 1] = -sx
    dRxm[:, 1, 2] = -cx
    dRxm[:, 2, 1] = cx
    dRxm[:, 2, 2] = -sx
    Ry = np.zeros((F, 3, 3))
    Ry[:, 0, 0] = cy
    Ry[:, 0, 2] = sy
    Ry[:, 1, 1] = 1.0
    Ry[:, 2, 0] = -sy
    Ry[:, 2, 2] = cy
    dRym = np.zeros((F, 3, 3))
    dRym[:, 0, 0] = -sy
    dRym[:, 0, 2] = cy
    dRym[:, 2, 0] = -cy
    dRym[:, 2, 2] = -sy
    Rz = np.zeros((F, 3, 3))
    Rz[:, 0, 0] = cz
    Rz[:, 0, 1] = -sz
    Rz[:, 1, 0] = sz
    Rz[:, 1, 1] = cz
    Rz[:, 2, 2] = 1.0
    dRzm = np.zeros((F, 3, 3))
    dRzm[:, 0, 0] = -sz
    dRzm[:, 0, 1] = -cz
    dRzm[:, 1, 0] = cz
    dRzm[:, 1, 1] = -sz

    ZyRx = Ry @ Rx
    R = Rz @ ZyRx
    dRx_full = Rz @ Ry @ dRxm
    dRy_full = Rz @ dRym @ Rx
    dRz_full = dRzm @ ZyRx
    return R, dRx_full, dRy_full, dRz_full


def _forward(data: _ReprojectionData, intr9: np.ndarray, poses: np.ndarray, with_jacobian: bool):
    """Residuals (and optionally Jacobian blocks) for the current parameters.

    Residual layout: [all u residuals; all v residuals], residual = predicted - observed.
    """
    alpha, beta, u0, v0, k1, k2, k3, p1, p2 = intr9
    R, dRx, dRy, dRz = _rotation_stacks(poses)
    fi = data.fidx
    X, Y = data.X, data.Y

    # Camera-frame points: board Z == 0 so only the first two rotation columns act.
    c0 = R[:, :, 0][fi]
    c1 = R[:, :, 1][fi]
    t = poses[:, 3:6][fi]
    Pc = c0 * X[:, None] + c1 * Y[:, None] + t
    z = Pc[:, 2]
    x = Pc[:, 0] / z
    y = Pc[:, 1] / z

    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xy = x * y
    xd = x * radial + 2.0 * p1 * xy + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * xy

    u = alpha * xd + u0
    v = beta * yd + v0
    ru = u - data.obs[:, 0]
    rv = v - data.obs[:, 1]
    residuals = np.concatenate([ru, rv])
    if not with_jacobian:
        return residuals, None

    M = data.n_points
    Ju_int = np.zeros((M, 9))
    Jv_int = np.zeros((M, 9))
    Ju_int[:, 0] = xd
    Ju_int[:, 2] = 1.0
    Jv_int[:, 1] = yd
    Jv_int[:, 3] = 1.0
    r4 = r2 * r2
    Ju_int[:, 4] = alpha * x * r2
    Ju_int[:, 5] = alpha * x * r4
    Ju_int[:, 6] = alpha * x * r4 * r2
    Ju_int[:, 7] = alpha * 2.0 * xy
    Ju_int[:, 8] = alpha * (r2 + 2.0 * x * x)
    Jv_int[:, 4] = beta * y * r2
    Jv_int[:, 5] = beta * y * r4
    Jv_int[:, 6] = beta * y * r4 * r2
    Jv_int[:, 7] = beta * (r2 + 2.0 * y * y)
    Jv_int[:, 8] = beta * 2.0 * xy

    draddr2 = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
    dxd_dx = radial + 2.0 * x * x * draddr2 + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = 2.0 * xy * draddr2 + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = dxd_dy
    dyd_dy = radial + 2.0 * y * y * draddr2 + 6.0 * p1 * y + 2.0 * p2 * x

    # Rows of d(u,v)/dPc via the perspective division.
    inv_z = 1.0 / z
    gu = np.empty((M, 3))
    gv = np.empty((M, 3))
    gu[:, 0] = alpha * dxd_dx * inv_z
    gu[:, 1] = alpha * dxd_dy * inv_z
    gu[:, 2] = -(gu[:, 0] * x + gu[:, 1] * y)
    gv[:, 0] = beta * dyd_dx * inv_z
    gv[:, 1] = beta * dyd_dy * inv_z
    gv[:, 2] = -(gv[:, 0] * x + gv[:, 1] * y)

    # dPc/dangle per point (board Z == 0 again).
    dPx = dRx[:, :, 0][fi] * X[:, None] + dRx[:, :, 1][fi] * Y[:, None]
    dPy = dRy[:, :, 0][fi] * X[:, None] + dRy[:, :, 1][fi] * Y[:, None]
    dPz = dRz[:, :, 0][fi] * X[:, None] + dRz[:, :, 1][fi] * Y[:, None]

    Ju_ext = np.empty((M, 6))
    Jv_ext = np.empty((M, 6))
    Ju_ext[:, 0] = (gu * dPx).sum(axis=1)
    Ju_ext[:, 1] = (gu * dPy).sum(axis=1)
    Ju_ext[:, 2] = (gu * dPz).sum(axis=1)
    Ju_ext[:, 3:6] = gu
    Jv_ext[:, 0] = (gv * dPx).sum(axis=1)
    Jv_ext[:, 1] = (gv * dPy).sum(axis=1)
    Jv_ext[:, 2] = (gv * dPz).sum(axis=1)
    Jv_ext[:, 3:6] = gv

    return residuals, (Ju_int, Jv_int, Ju_ext, Jv_ext)


def dense_jacobian(frames, intr: Intrinsics, dist: Distortion, poses) -> tuple[np.ndarray, np.ndarray]:
    """Residual vector and dense (2M, 9 + 6F) analytic Jacobian, mainly for
    cross-checks against finite differences."""
    data = _ReprojectionData(frames)
    intr9 = np.array([intr.alpha, intr.beta, intr.u0, intr.v0, *dist.as_array()])
    pose_arr = np.array([p.as_array() for p in poses])
    r, blocks = _forward(data, intr9, pose_arr, with_jacobian=True)
    Ju_int, Jv_int, Ju_ext, Jv_ext = blocks
    M = data.n_points
    F = data.n_frames
    J = np.zeros((2 * M, 9 + 6 * F))
    J[:M, :9] = Ju_int
    J[M:, :9] = Jv_int
    for k, (a, b) in enumerate(data.slices):
        J[a:b, 9 + 6 * k : 15 + 6 * k] = Ju_ext[a:b]
        J[M + a : M + b, 9 + 6 * k : 15 + 6 * k] = Jv_ext[a:b]
    return r, J


def residual_vector(frames, intr: Intrinsics, dist: Distortion, poses) -> np.ndarray:
    """Stacked reprojection residuals (predicted - observed)."""
    data = _ReprojectionData(frames)
    intr9 = np.array([intr.alpha, intr.beta, intr.u0, intr.v0, *dist.as_array()])
    pose_arr = np.array([p.as_array() for p in poses])
    r, _ = _forward(data, intr9, pose_arr, with_jacobian=False)
    return r


def _normal_equations(data: _ReprojectionData, intr9, poses, free_idx):
    """Gradient, blockwise J^T J and residuals at the current parameters."""
    r, blocks = _forward(data, intr9, poses, with_jacobian=True)
    Ju_int, Jv_int, Ju_ext, Jv_ext = blocks
    M = data.n_points
    F = data.n_frames
    ru, rv = r[:M], r[M:]

    A_ii = Ju_int.T @ Ju_int + Jv_int.T @ Jv_int
    g_i = Ju_int.T @ ru + Jv_int.T @ rv
    B, C, g_e = [], [], []
    for a, b in data.slices:
        B.append(Ju_int[a:b].T @ Ju_ext[a:b] + Jv_int[a:b].T @ Jv_ext[a:b])
        C.append(Ju_ext[a:b].T @ Ju_ext[a:b] + Jv_ext[a:b].T @ Jv_ext[a:b])
        g_e.append(Ju_ext[a:b].T @ ru[a:b] + Jv_ext[a:b].T @ rv[a:b])

    d = len(free_idx) + 6 * F
    A = np.zeros((d, d))
    g = np.zeros(d)
    ni = len(free_idx)
    A[:ni, :ni] = A_ii[np.ix_(free_idx, free_idx)]
    g[:ni] = g_i[free_idx]
    for k in range(F):
        s = ni + 6 * k
        A[:ni, s : s + 6] = B[k][free_idx]
        A[s : s + 6, :ni] = B[k][free_idx].T
        A[s : s + 6, s : s + 6] = C[k]
        g[s : s + 6] = g_e[k]
    return r, A, g


def _numeric_normal_equations(data: _ReprojectionData, intr9, poses, free_idx):
    """Finite-difference fallback for the normal equations (cross-check path)."""

    def residuals_at(theta):
        i9 = intr9.copy()
        i9[free_idx] = theta[: len(free_idx)]
        p = theta[len(free_idx) :].reshape(poses.shape)
        r, _ = _forward(data, i9, p, with_jacobian=False)
        return r

    theta0 = np.concatenate([intr9[free_idx], poses.ravel()])
    r0 = residuals_at(theta0)
    J = np.zeros((r0.size, theta0.size))
    for j in range(theta0.size):
        h = 1e-6 * max(1.0, abs(theta0[j]))
        tp = theta0.copy()
        tp[j] += h
        tm = theta0.copy()
        tm[j] -= h
        J[:, j] = (residuals_at(tp) - residuals_at(tm)) / (2.0 * h)
    return r0, J.T @ J, J.T @ r0


# ---------------------------------------------------------------------------
# Levenberg-Marquardt refinement
# ---------------------------------------------------------------------------

LM_INITIAL_DAMPING = 1e-3
LM_DAMPING_UP = 10.0
LM_DAMPING_DOWN = 10.0
LM_MAX_DAMPING = 1e14
LM_COST_TOL = 1e-12
LM_ZERO_COST = 1e-20  # mean squared residual below this counts as already optimal


def refine(
    frames,
    initial: CalibrationEstimate,
    free_mask=None,
    max_iterations: int = 100,
    numeric_jacobian: bool = False,
) -> CalibrationEstimate:
    """Minimize the total squared reprojection error over the unmasked camera
    parameters and all extrinsics.  Cost never increases across accepted
    steps; masked parameters are returned bit-exact.  ``converged`` is False
    when the iteration cap was hit before the relative-cost tolerance.
    """
    frames = list(frames)
    if len(frames) != len(initial.extrinsics):
        raise ValueError("initial estimate must carry one pose per frame")
    mask = FULL_MASK.copy() if free_mask is None else np.asarray(free_mask, dtype=bool)
    free_idx = np.flatnonzero(mask)
    data = _ReprojectionData(frames)
    intr9 = initial.param_values()
    poses = np.array([p.as_array() for p in initial.extrinsics])
    normal_eq = _numeric_normal_equations if numeric_jacobian else _normal_equations

    r, A, g = normal_eq(data, intr9, poses, free_idx)
    cost = float(r @ r)
    lam = LM_INITIAL_DAMPING
    converged = cost / max(r.size, 1) < LM_ZERO_COST
    ni = len(free_idx)

    iteration = 0
    while not converged and iteration < max_iterations:
        iteration += 1
        diag = np.diag(A).copy()
        damped = A + lam * np.diag(diag)
        try:
            c_factor = scipy.linalg.cho_factor(damped, check_finite=False)
            step = scipy.linalg.cho_solve(c_factor, g, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            lam *= LM_DAMPING_UP
            if lam > LM_MAX_DAMPING:
                raise SingularNormalEquationsError(
                    "normal equations singular beyond damping repair"
                ) from None
            continue

        new_intr9 = intr9.copy()
        new_intr9[free_idx] -= step[:ni]
        new_poses = poses - step[ni:].reshape(poses.shape)
        new_r, _ = _forward(data, new_intr9, new_poses, with_jacobian=False)
        new_cost = float(new_r @ new_r)

        if new_cost < cost:
            rel_drop = (cost - new_cost) / max(cost, 1e-300)
            intr9, poses = new_intr9, new_poses
            cost = new_cost
            lam = max(lam / LM_DAMPING_DOWN, 1e-15)
            if rel_drop < LM_COST_TOL or cost / max(r.size, 1) < LM_ZERO_COST:
                converged = True
            else:
                r, A, g = normal_eq(data, intr9, poses, free_idx)
        else:
            lam *= LM_DAMPING_UP
            if lam > LM_MAX_DAMPING:
                break  # stalled: return current best with converged=False

    rms = math.sqrt(cost / (2 * data.n_points))
    new_est = CalibrationEstimate(
        intrinsics=Intrinsics(
            alpha=intr9[0], beta=intr9[1], u0=intr9[2], v0=intr9[3],
            gamma=initial.intrinsics.gamma,
        ),
        distortion=Distortion.from_array(intr9[4:9]),
        extrinsics=tuple(Pose.from_array(p) for p in poses),
        param_variance=initial.param_variance,
        rms=rms,
        converged=converged,
    )
    return new_est


def parameter_variances(frames, estimate: CalibrationEstimate, free_mask=None) -> np.ndarray:
    """Gauss-Newton covariance diagonal for the nine camera parameters.

    sigma^2 = s^2 * diag(S^-1) with S the Schur complement of the extrinsic
    block in J^T J and s^2 = SSE / (2N - d).  Masked parameters get 0.
    """
    frames = list(frames)
    mask = FULL_MASK.copy() if free_mask is None else np.asarray(free_mask, dtype=bool)
    free_idx = np.flatnonzero(mask)
    data = _ReprojectionData(frames)
    intr9 = estimate.param_values()
    poses = np.array([p.as_array() for p in estimate.extrinsics])
    r, blocks = _forward(data, intr9, poses, with_jacobian=True)
    Ju_int, Jv_int, Ju_ext, Jv_ext = blocks
    M = data.n_points
    ru, rv = r[:M], r[M:]

    A_ii = (Ju_int.T @ Ju_int + Jv_int.T @ Jv_int)[np.ix_(free_idx, free_idx)]
    S = A_ii.copy()
    for a, b in data.slices:
        Bk = (Ju_int[a:b].T @ Ju_ext[a:b] + Jv_int[a:b].T @ Jv_ext[a:b])[free_idx]
        Ck = Ju_ext[a:b].T @ Ju_ext[a:b] + Jv_ext[a:b].T @ Jv_ext[a:b]
        try:
            csol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(Ck, check_finite=False), Bk.T, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise UnobservableParameterError(f"extrinsic block singular for frame slice {(a, b)}") from exc
        S -= Bk @ csol

    sse = float(r @ r)
    dof = 2 * data.n_points - (len(free_idx) + 6 * data.n_frames)
    s2 = sse / max(dof, 1)
    try:
        S_inv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S, check_finite=False), np.eye(len(free_idx)), check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise UnobservableParameterError("camera-parameter information matrix is singular") from exc
    var_free = s2 * np.diag(S_inv)
    if np.any(var_free < 0):
        raise UnobservableParameterError("negative variance from ill-conditioned information matrix")
    out = np.zeros(9)
    out[free_idx] = var_free
    return out


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def calibrate(frames, config: CalibrationConfig) -> CalibrationEstimate:
    """Homographies -> initialization -> refinement -> covariance,
    packaged as a CalibrationEstimate."""
    frames = list(frames)
    if not frames:
        raise InsufficientFramesError("calibrate needs at least one frame")
    model = config.resolve_model(len(frames))
    if model not in ("full", "restricted"):
        raise ValueError(f"unknown model {model!r}")
    if model == "full" and len(frames) < 3:
        raise InsufficientFramesError(f"full model needs >= 3 frames, got {len(frames)}")

    center_u, center_v = config.image_width / 2.0, config.image_height / 2.0
    if model == "restricted":
        # Startup/stopgap model: tied focal scales, fitted by reprojection.
        # With the distortion unmodeled, freeing both scales has spurious
        # minima (one scale runs away); see square_pixel_estimate.
        intr0, poses0 = square_pixel_estimate(frames, center_u, center_v)
        r = residual_vector(frames, intr0, Distortion(), poses0)
        refined = CalibrationEstimate(
            intrinsics=intr0,
            distortion=Distortion(),
            extrinsics=poses0,
            param_variance=np.zeros(9),
            rms=math.sqrt(float(r @ r) / len(r)),
            converged=True,
        )
        mask = RESTRICTED_MASK
    else:
        mask = FULL_MASK
        # Refinement starts from a center-pinned square-pixel fit (on a few
        # views; it is only an init) rather than the unconstrained closed
        # form: strong tangential distortion corrupts the homographies'
        # perspective entries enough that the distortion-blind algebra
        # initializes L-M outside the global basin.
        intr0, _ = square_pixel_estimate(frames[:3], center_u, center_v, iterations=30)
        hs = [estimate_homography(f) for f in frames]
        extr0 = tuple(extrinsics_from_homography(H, intr0) for H in hs)
        init = CalibrationEstimate(
            intrinsics=intr0,
            distortion=Distortion(),
            extrinsics=extr0,
            param_variance=np.zeros(9),
            rms=math.inf,
            converged=False,
        )
        refined = refine(
            frames,
            init,
            free_mask=mask,
            max_iterations=config.max_iterations,
            numeric_jacobian=config.numeric_jacobian,
        )
    variances = parameter_variances(frames, refined, free_mask=mask)
    return CalibrationEstimate(
        intrinsics=refined.intrinsics,
        distortion=refined.distortion,
        extrinsics=refined.extrinsics,
        param_variance=variances,
        rms=refined.rms,
        converged=refined.converged,
    )
