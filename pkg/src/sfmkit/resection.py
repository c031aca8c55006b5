"""Camera resection: DLT projection-matrix estimation and RANSAC PnP.

Estimates the 3x4 projection matrix from 2D-3D correspondences via the
homogeneous cross-product DLT (two independent equations per
correspondence), decomposes it into intrinsics and pose, and registers new
views with a 6-point RANSAC loop followed by fixed-intrinsics
Levenberg-Marquardt pose refinement.
"""

from __future__ import annotations

import numpy as np

from .core import (
    nearest_rotation,
    rotation_exp,
    rotation_log,
    rq_decompose,
    smallest_singular_vector,
    to_homogeneous,
)
from .errors import (
    DegeneratePointsError,
    InsufficientPointsError,
    NoConsensusError,
    SingularMatrixError,
)
from .ba import _pose_observation_blocks, MIN_DEPTH
from .matching import RansacConfig, normalization_transform
from .twoview import CameraIntrinsics, CameraPose

MIN_DLT_POINTS = 6
PNP_THRESHOLD_PX = 4.0
PNP_MIN_CONSENSUS = 6
PNP_REFINE_ITERS = 20


def dlt_projection_matrix(points3d: np.ndarray,
                          points2d: np.ndarray) -> np.ndarray:
    """3x4 projection matrix from >= 6 non-coplanar 2D-3D correspondences.

    Both point sets are similarity-normalized first; each correspondence
    contributes the two independent rows of [hom(p)]x (I_3 kron hom(P)^T),
    the stacked system is solved by SVD nullspace, and the normalizations
    are undone. The result has unit Frobenius norm and det of its left 3x3
    block made positive (points in front project with positive depth).
    """
    P3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    P2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    n = P3.shape[0]
    if P2.shape[0] != n:
        raise ValueError("2D and 3D point counts differ")
    if n < MIN_DLT_POINTS:
        raise InsufficientPointsError(
            f"need >= {MIN_DLT_POINTS} correspondences, got {n}")
    T2 = normalization_transform(P2)
    T3 = normalization_transform(P3)
    p = to_homogeneous(P2) @ T2.T
    X = to_homogeneous(P3) @ T3.T

    A = np.zeros((2 * n, 12))
    # Rows of [hom(p)]x (I kron X^T) for w = 1 (normalized p has w = 1):
    #   row 0:  0*M0 - 1*M1 + y*M2 -> (0, -X, y X)
    #   row 1:  1*M0 + 0*M1 - x*M2 -> (X, 0, -x X)
    A[0::2, 4:8] = -X
    A[0::2, 8:12] = p[:, 1:2] * X
    A[1::2, 0:4] = X
    A[1::2, 8:12] = -p[:, 0:1] * X
    m, ambiguous = smallest_singular_vector(A)
    if ambiguous:
        raise DegeneratePointsError(
            "DLT system has an ambiguous nullspace (coplanar 3D points?)")
    M = m.reshape(3, 4)
    M = np.linalg.inv(T2) @ M @ T3
    M /= np.linalg.norm(M)
    det = np.linalg.det(M[:, :3])
    if det < 0:
        M = -M
    return M


def decompose_projection(M: np.ndarray):
    """Split M = K [R | t] into intrinsics and pose.

    The left 3x3 block is RQ-factored (K scaled so K[2,2] = 1), the camera
    center comes from -H^-1 h, and the pose translation is -R @ center.
    """
    M = np.asarray(M, dtype=np.float64)
    H = M[:, :3]
    h = M[:, 3]
    det = np.linalg.det(H)
    if abs(det) <= 1e-12 * max(np.linalg.norm(M), 1.0):
        raise SingularMatrixError("projection matrix has singular left block")
    if det < 0:
        H, h = -H, -h
    K, R = rq_decompose(H)
    K = K / K[2, 2]
    center = -np.linalg.solve(H, h)
    pose = CameraPose(R=R, t=-R @ center)
    intr = CameraIntrinsics(fx=float(K[0, 0]), fy=float(K[1, 1]),
                            cx=float(K[0, 2]), cy=float(K[1, 2]),
                            skew=float(K[0, 1]))
    return intr, pose


def _project_all(R, t, intrinsics, pts):
    """Projections and depths without raising on behind-camera points."""
    x_cam = pts @ R.T + t
    z = x_cam[:, 2]
    safe = np.where(z > MIN_DEPTH, z, 1.0)
    u = (intrinsics.fx * x_cam[:, 0] + intrinsics.skew * x_cam[:, 1]) / safe \
        + intrinsics.cx
    v = intrinsics.fy * x_cam[:, 1] / safe + intrinsics.cy
    return np.stack([u, v], axis=1), z


def refine_pose(pose: CameraPose, intrinsics: CameraIntrinsics,
                points3d: np.ndarray, points2d: np.ndarray,
                max_iters: int = PNP_REFINE_ITERS) -> CameraPose:
    """Damped Gauss-Newton on the reprojection error over (axis-angle, t).

    Only strictly improving steps are accepted, so the returned pose never
    reprojects worse than the input on the given correspondences.
    """
    pts3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    pts2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    w = rotation_log(pose.R)
    t = pose.t.copy()

    def cost_residuals(w, t):
        R = rotation_exp(w)
        uv, z, Jc, _ = _pose_observation_blocks(w, R, t, intrinsics, pts3)
        r = uv - pts2
        bad = z <= MIN_DEPTH
        r[bad] = 1e4
        Jc[bad] = 0.0
        return float(np.sum(r * r)), r, Jc

    cost, r, Jc = cost_residuals(w, t)
    lam = 1e-3
    for _ in range(max_iters):
        J = Jc.reshape(-1, 6)
        A = J.T @ J
        diag = np.diag_indices_from(A)
        A[diag] += lam * np.maximum(A[diag], 1e-10)
        try:
            delta = np.linalg.solve(A, -(J.T @ r.reshape(-1)))
        except np.linalg.LinAlgError:
            break
        w_t, t_t = w + delta[:3], t + delta[3:]
        cost_t, r_t, Jc_t = cost_residuals(w_t, t_t)
        if cost_t < cost:
            w, t = rotation_log(rotation_exp(w_t)), t_t
            cost, r, Jc = cost_t, r_t, Jc_t
            lam = max(lam * 0.1, 1e-12)
            if cost <= 1e-20:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    return CameraPose(R=rotation_exp(w), t=t)


def pnp_ransac(points3d: np.ndarray, points2d: np.ndarray,
               intrinsics: CameraIntrinsics,
               cfg: RansacConfig | None = None):
    """Register a view from 2D-3D correspondences.

    RANSAC over 6-point DLT samples: each sample's projection matrix is
    decomposed, the estimated intrinsics are discarded in favor of the known
    ones (the rotation from the RQ factorization is already orthonormal),
    and the hypothesis is scored by reprojection error below
    ``cfg.inlier_threshold_px`` (default 4 px here) with positive depth. The
    winner is refined on its inliers with fixed intrinsics. Returns
    ``(pose, inlier_indices)``.
    """
    cfg = cfg or RansacConfig(inlier_threshold_px=PNP_THRESHOLD_PX)
    threshold_px = cfg.inlier_threshold_px
    pts3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    pts2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    n = pts3.shape[0]
    if n < MIN_DLT_POINTS:
        raise InsufficientPointsError(
            f"PnP needs >= {MIN_DLT_POINTS} correspondences, got {n}")
    rng = np.random.default_rng(cfg.rng_seed)

    best_count = 0
    best_mask = None
    best_pose = None
    max_iters = cfg.max_iterations
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=MIN_DLT_POINTS, replace=False)
        try:
            M = dlt_projection_matrix(pts3[sample], pts2[sample])
            _, pose = decompose_projection(M)
        except (DegeneratePointsError, InsufficientPointsError,
                SingularMatrixError):
            continue
        pose = CameraPose(R=nearest_rotation(pose.R), t=pose.t)
        uv, z = _project_all(pose.R, pose.t, intrinsics, pts3)
        err = np.linalg.norm(uv - pts2, axis=1)
        mask = (z > MIN_DEPTH) & (err < threshold_px)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_pose = count, mask, pose
            frac = count / n
            if frac >= 1.0:
                break
            denom = np.log1p(-min(frac ** MIN_DLT_POINTS, 1.0 - 1e-16))
            if denom < 0:
                needed = int(np.ceil(np.log1p(-cfg.confidence) / denom))
                max_iters = min(cfg.max_iterations, max(needed, 1))

    if best_count < PNP_MIN_CONSENSUS:
        raise NoConsensusError(
            f"PnP consensus {best_count} < {PNP_MIN_CONSENSUS} of {n}")
    pose = refine_pose(best_pose, intrinsics, pts3[best_mask], pts2[best_mask])
    uv, z = _project_all(pose.R, pose.t, intrinsics, pts3)
    err = np.linalg.norm(uv - pts2, axis=1)
    mask = (z > MIN_DEPTH) & (err < threshold_px)
    if int(mask.sum()) < best_count:
        pose, mask = best_pose, best_mask
    return pose, [int(i) for i in np.flatnonzero(mask)]
