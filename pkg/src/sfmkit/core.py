"""Dense linear-algebra and rotation kernels shared by every other module.

Conventions: matrices and vectors are plain ``numpy.ndarray`` (float64,
row-major). Rotations are 3x3 orthonormal matrices with det = +1; axis-angle
vectors encode (axis * angle) with angle in [0, pi].
"""

from __future__ import annotations

import numpy as np

from .errors import AtInfinityError, SingularMatrixError

# Default tolerances; callers may override per call.
SVD_AMBIGUITY_TOL = 1e-12
SINGULAR_DET_TOL = 1e-12
HOMOGENEOUS_W_TOL = 1e-12
ROTATION_TOL = 1e-9


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix [v]x such that skew(v) @ u == cross(v, u)."""
    x, y, z = np.asarray(v, dtype=float).ravel()
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def smallest_singular_vector(A, ambiguity_tol: float = SVD_AMBIGUITY_TOL):
    """Right-singular vector of A for the smallest singular value.

    Returns ``(v, ambiguous)`` where v is unit-norm with its largest-magnitude
    component made positive (deterministic sign), and ``ambiguous`` is True
    when the two smallest singular values coincide within ``ambiguity_tol``
    relative to the largest one, i.e. the nullspace direction is not unique.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("expected a 2-D matrix with at least one row")
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    v = vt[-1]
    ambiguous = False
    if vt.shape[0] >= 2:
        # s only holds min(rows, cols) values; missing ones are exact zeros.
        s_full = np.zeros(vt.shape[0])
        s_full[: s.size] = s
        scale = max(s_full[0], 1.0)
        ambiguous = (s_full[-2] - s_full[-1]) <= ambiguity_tol * scale
    i = int(np.argmax(np.abs(v)))
    if v[i] < 0:
        v = -v
    return v, ambiguous


def rq_decompose(H, det_tol: float = SINGULAR_DET_TOL):
    """Factor a 3x3 matrix as H = K @ R, K upper-triangular, R a rotation.

    Follows the QR-of-inverse construction: H^-1 = Q R_t implies
    H = R_t^-1 Q^T with R_t^-1 upper-triangular. A sign matrix S (S @ S = I)
    is absorbed so that diag(K) > 0 and det(R) = +1. Inputs with
    det(H) < 0 are sign-normalized first, so the factorization then satisfies
    K @ R = -H (all callers treat H as defined up to scale).
    """
    H = np.asarray(H, dtype=float)
    if H.shape != (3, 3):
        raise ValueError("rq_decompose expects a 3x3 matrix")
    det = np.linalg.det(H)
    if abs(det) <= det_tol:
        raise SingularMatrixError(f"|det(H)| = {abs(det):.3e} <= {det_tol:.1e}")
    if det < 0:
        H = -H
    q, r = np.linalg.qr(np.linalg.inv(H))
    K = np.linalg.inv(r)
    R = q.T
    sign = np.sign(np.diag(K))
    sign[sign == 0] = 1.0
    K = K * sign[np.newaxis, :]
    R = R * sign[:, np.newaxis]
    return K, R


def rotation_exp(axis_angle) -> np.ndarray:
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    w = np.asarray(axis_angle, dtype=float).ravel()
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        # Series for sin(t)/t and (1-cos t)/t^2; exact enough below 1e-8.
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def rotation_log(R) -> np.ndarray:
    """Inverse of :func:`rotation_exp`; returns axis-angle with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(v))  # |sin theta|
    theta = float(np.arctan2(s, c))
    if theta < 1e-8:
        return v  # sin(t)/t ~ 1
    if s > 1e-4 or c > 0:
        return v * (theta / s)
    # Near pi the antisymmetric part vanishes, but (R + R^T)/2 - c I equals
    # (1 - c) axis axis^T exactly, so its dominant column gives the axis at
    # full precision; the tiny antisymmetric part still fixes the sign.
    M = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(M)))
    axis = M[:, k] / np.linalg.norm(M[:, k])
    if np.dot(axis, v) < 0:
        axis = -axis
    return axis * theta


def is_rotation(R, tol: float = ROTATION_TOL) -> bool:
    """True when R is orthonormal with det +1 within tol."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


def nearest_rotation(M) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (orthogonal Procrustes)."""
    u, _, vt = np.linalg.svd(np.asarray(M, dtype=float))
    R = u @ vt
    if np.linalg.det(R) < 0:
        R = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return R


def from_homogeneous(p, w_tol: float = HOMOGENEOUS_W_TOL) -> np.ndarray:
    """Dehomogenize: divide the leading components by the last one."""
    p = np.asarray(p, dtype=float).ravel()
    if p.size < 2:
        raise ValueError("need at least 2 components")
    w = p[-1]
    if abs(w) <= w_tol:
        raise AtInfinityError(f"|w| = {abs(w):.3e} <= {w_tol:.1e}")
    return p[:-1] / w


def to_homogeneous(p) -> np.ndarray:
    """Append a unit component: (x, ..., z) -> (x, ..., z, 1)."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return np.append(p, 1.0)
    return np.hstack([p, np.ones((p.shape[0], 1))])
