import numpy as np
import pytest

from camcal.calibration import DetectedFrame
from camcal.geometry import BoardSpec, CameraTruth, Distortion, Intrinsics, Pose, project_board

IMG_W, IMG_H = 1280, 720

TRUTH_INTR = Intrinsics(alpha=1068.0, beta=1073.0, u0=635.0, v0=355.0)
TRUTH_DIST = Distortion(k1=-0.0031, k2=-0.2059, k3=-0.0028, p1=-0.0038, p2=0.2478)
TRUTH_PARAMS = np.array([1068.0, 1073.0, 635.0, 355.0, -0.0031, -0.2059, -0.0028, -0.0038, 0.2478])


@pytest.fixture(scope="session")
def board():
    return BoardSpec()


@pytest.fixture(scope="session")
def truth():
    return CameraTruth(intrinsics=TRUTH_INTR, distortion=TRUTH_DIST, width=IMG_W, height=IMG_H)


def sample_spread_pose(rng):
    """A pose drawn from the well-spread box used by the recovery oracles."""
    xr, yr = np.radians(rng.uniform(-55, 55, 2))
    zr = np.radians(rng.uniform(-40, 40))
    zt = rng.uniform(900, 1600)
    xt, yt = rng.uniform(-0.12, 0.12, 2) * zt
    return Pose(xr, yr, zr, xt, yt, zt)


def spread_visible_poses(n, seed, intr=TRUTH_INTR, dist=TRUTH_DIST, board=BoardSpec()):
    rng = np.random.default_rng(seed)
    poses = []
    while len(poses) < n:
        p = sample_spread_pose(rng)
        if project_board(board, p, intr, dist, IMG_W, IMG_H).visible:
            poses.append(p)
    return poses


def frames_at(poses, intr=TRUTH_INTR, dist=TRUTH_DIST, board=BoardSpec(), noise_sigma=0.0, seed=0):
    """Detected frames from exact projection plus optional Gaussian noise."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        bp = project_board(board, p, intr, dist, IMG_W, IMG_H)
        px = bp.pixels
        if noise_sigma > 0:
            px = px + rng.normal(0.0, noise_sigma, px.shape)
        out.append(DetectedFrame(ids=bp.ids, pixels=px, board=board))
    return out
