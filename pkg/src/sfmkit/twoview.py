"""Essential-matrix pose recovery and linear triangulation.

World frame convention: the first (left) camera of a pair is [I | 0] and a
pose maps world to camera coordinates, x_cam = R @ x_world + t. Depth is the
third camera-frame coordinate; points in front of a camera have z > 0.
Correspondences satisfy hom(x_right)^T @ E @ hom(x_left) = 0 in normalized
image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import from_homogeneous, skew, smallest_singular_vector, to_homogeneous
from .errors import (
    AtInfinityError,
    CheiralityAmbiguousError,
    CoincidentPointError,
    PointAtInfinityError,
    ZeroBaselineError,
)

CHEIRALITY_MARGIN = 0.05    # runner-up within 5% of the winner => ambiguous
CHEIRALITY_MIN_FRACTION = 0.5


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels (no distortion model)."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        return cls(fx=float(K[0, 0]), fy=float(K[1, 1]),
                   cx=float(K[0, 2]), cy=float(K[1, 2]), skew=float(K[0, 1]))


@dataclass
class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).ravel()

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, C = -R^T @ t."""
        return -self.R.T @ self.t

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])

    def projection(self, intrinsics: CameraIntrinsics) -> np.ndarray:
        return intrinsics.matrix @ self.matrix34()


def camera_center(pose: CameraPose) -> np.ndarray:
    return pose.center


def essential_from_fundamental(F: np.ndarray,
                               K: CameraIntrinsics) -> np.ndarray:
    """E = K^T F K, projected onto the essential manifold (singular values
    (s, s, 0) with s the mean of the two leading ones) and scaled to unit
    Frobenius norm."""
    Km = K.matrix
    E = Km.T @ np.asarray(F, dtype=float) @ Km
    u, s, vt = np.linalg.svd(E)
    m = 0.5 * (s[0] + s[1])
    E = u @ np.diag([m, m, 0.0]) @ vt
    E /= np.linalg.norm(E)
    i, j = np.unravel_index(np.argmax(np.abs(E)), E.shape)
    if E[i, j] < 0:
        E = -E
    return E


def decompose_essential(E: np.ndarray):
    """The four (R, unit t) candidates of E = [t]x R via the SVD
    W-construction; every R has det +1."""
    u, _, vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0],
                  [1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0]])
    ra = u @ W @ vt
    rb = u @ W.T @ vt
    tu = u[:, 2].copy()
    return [(ra, tu), (ra, -tu), (rb, tu), (rb, -tu)]


def triangulate_dlt(p_left, p_right, M_left, M_right) -> np.ndarray:
    """Linear two-view triangulation from the cross-product constraints
    [hom(p)]x @ M @ hom(P) = 0 stacked for both views."""
    M_left = np.asarray(M_left, dtype=float)
    M_right = np.asarray(M_right, dtype=float)
    if np.allclose(M_left, M_right):
        raise ZeroBaselineError("identical projection matrices")
    return triangulate_multiview([p_left, p_right], [M_left, M_right])


def triangulate_multiview(points, projections) -> np.ndarray:
    """Triangulate one 3D point from >= 2 observations: stack
    [hom(p_i)]x @ M_i for every view and take the SVD nullspace."""
    rows = []
    for p, M in zip(points, projections):
        rows.append(skew(to_homogeneous(np.asarray(p, dtype=float)))
                    @ np.asarray(M, dtype=float))
    L = np.vstack(rows)
    Ph, ambiguous = smallest_singular_vector(L)
    if ambiguous:
        # Two-dimensional nullspace: the rays are parallel or pass through a
        # common center, so no finite intersection is determined.
        raise PointAtInfinityError("viewing rays do not intersect uniquely")
    try:
        return from_homogeneous(Ph)
    except AtInfinityError as exc:
        raise PointAtInfinityError(str(exc)) from exc


def depth_in_camera(R: np.ndarray, t: np.ndarray, P: np.ndarray) -> float:
    """Camera-frame z of a world point."""
    return float(R[2] @ np.asarray(P, dtype=float) + t[2])


def select_pose_cheirality(candidates, x_left: np.ndarray,
                           x_right: np.ndarray) -> CameraPose:
    """Pick the decomposition that places the most triangulated points in
    front of both cameras (left camera fixed at [I | 0]).

    ``x_left``/``x_right`` are (n, 2) normalized image coordinates. Raises
    when the vote is ambiguous: runner-up within 5% of the winner, or the
    winner explains fewer than half the points.
    """
    x_left = np.atleast_2d(np.asarray(x_left, dtype=float))
    x_right = np.atleast_2d(np.asarray(x_right, dtype=float))
    n = x_left.shape[0]
    if n < 1:
        raise ValueError("need at least one correspondence")
    M_left = np.hstack([np.eye(3), np.zeros((3, 1))])
    counts = []
    for R, t in candidates:
        M_right = np.hstack([R, np.asarray(t, dtype=float)[:, None]])
        good = 0
        for i in range(n):
            try:
                P = triangulate_dlt(x_left[i], x_right[i], M_left, M_right)
            except (PointAtInfinityError, ZeroBaselineError):
                continue
            if P[2] > 0 and depth_in_camera(R, t, P) > 0:
                good += 1
        counts.append(good)
    order = np.argsort(counts, kind="stable")
    best = int(order[-1])
    if counts[best] < CHEIRALITY_MIN_FRACTION * n:
        raise CheiralityAmbiguousError(
            f"best candidate explains {counts[best]}/{n} points")
    if len(counts) > 1:
        runner = int(order[-2])
        if counts[runner] >= (1.0 - CHEIRALITY_MARGIN) * counts[best]:
            raise CheiralityAmbiguousError(
                f"candidates tie at {counts[runner]} vs {counts[best]}")
    R, t = candidates[best]
    return CameraPose(R=R, t=np.asarray(t, dtype=float))


def triangulation_angle(P, C1, C2) -> float:
    """Angle (radians) between the rays from two camera centers to a point."""
    P = np.asarray(P, dtype=float)
    r1 = P - np.asarray(C1, dtype=float)
    r2 = P - np.asarray(C2, dtype=float)
    n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if n1 <= 1e-15 or n2 <= 1e-15:
        raise CoincidentPointError("point coincides with a camera center")
    c = np.clip(r1 @ r2 / (n1 * n2), -1.0, 1.0)
    return float(np.arccos(c))


def normalized_coordinates(pts: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Map pixel coordinates through K^-1 into normalized image coordinates."""
    h = to_homogeneous(np.atleast_2d(np.asarray(pts, dtype=float)))
    x = h @ np.linalg.inv(K.matrix).T
    return x[:, :2] / x[:, 2:3]
