"""Bundle adjustment: joint refinement of camera poses and 3D points.

Minimizes the total squared reprojection error over all observations with a
damped least-squares (Levenberg-Marquardt) iteration on analytic Jacobians.
Poses are parameterized as axis-angle + translation (6 values); intrinsics
stay fixed. The first pose is the gauge anchor and never moves. Small
systems are solved densely; large ones eliminate the point blocks with a
Schur complement and solve only the reduced pose system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import rotation_exp, rotation_log, skew
from .errors import BehindCameraError, DivergedError
from .twoview import CameraIntrinsics, CameraPose

log = logging.getLogger(__name__)

MIN_DEPTH = 1e-9
BEHIND_RESIDUAL = 1e4          # clamp for observations behind a camera
LAMBDA0 = 1e-3
LAMBDA_MAX = 1e12
GRAD_TOL = 1e-10
COST_FLOOR_PX = 1e-12          # rmse below this counts as an exact fixed point
DAMPING_FLOOR = 1e-10
DENSE_PARAM_LIMIT = 1200       # above this, use the Schur path


@dataclass
class BAProblem:
    """Poses, points, fixed intrinsics, and pixel observations.

    ``obs_pose[k]``, ``obs_point[k]`` index the camera and point seen in
    observation k at pixel ``obs_uv[k]``. Pose 0 is the gauge anchor.
    """

    poses: list[CameraPose]
    points: np.ndarray
    intrinsics: CameraIntrinsics
    obs_pose: np.ndarray
    obs_point: np.ndarray
    obs_uv: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.obs_pose = np.asarray(self.obs_pose, dtype=np.intp).ravel()
        self.obs_point = np.asarray(self.obs_point, dtype=np.intp).ravel()
        self.obs_uv = np.asarray(self.obs_uv, dtype=np.float64).reshape(-1, 2)
        m = self.obs_pose.size
        if self.obs_point.size != m or self.obs_uv.shape[0] != m:
            raise ValueError("observation arrays must have matching length")
        if m and (self.obs_pose.min() < 0
                  or self.obs_pose.max() >= len(self.poses)):
            raise ValueError("observation references an invalid pose index")
        if m and (self.obs_point.min() < 0
                  or self.obs_point.max() >= self.points.shape[0]):
            raise ValueError("observation references an invalid point index")

    @property
    def n_observations(self) -> int:
        return self.obs_pose.size

    @classmethod
    def from_observations(cls, poses, points, intrinsics, observations):
        """Build from an iterable of (pose_index, point_index, (u, v))."""
        obs = list(observations)
        op = np.array([o[0] for o in obs], dtype=np.intp)
        oq = np.array([o[1] for o in obs], dtype=np.intp)
        uv = np.array([o[2] for o in obs], dtype=np.float64).reshape(-1, 2)
        return cls(poses=list(poses), points=points, intrinsics=intrinsics,
                   obs_pose=op, obs_point=oq, obs_uv=uv)


@dataclass
class BAReport:
    """Before/after statistics of one optimizer run."""

    initial_rmse_px: float
    final_rmse_px: float
    iterations: int
    converged: bool
    per_view_before: np.ndarray
    per_view_after: np.ndarray
    n_observations: int = 0


def project_point(pose: CameraPose, intrinsics: CameraIntrinsics, P) -> np.ndarray:
    """Pinhole projection of a world point; the point must be in front."""
    x = pose.R @ np.asarray(P, dtype=float) + pose.t
    if x[2] <= MIN_DEPTH:
        raise BehindCameraError(f"camera-frame depth {x[2]:.3e} <= {MIN_DEPTH}")
    u = (intrinsics.fx * x[0] + intrinsics.skew * x[1]) / x[2] + intrinsics.cx
    v = intrinsics.fy * x[1] / x[2] + intrinsics.cy
    return np.array([u, v])


def rotation_action_jacobian(w: np.ndarray, R: np.ndarray,
                             pts: np.ndarray) -> np.ndarray:
    """d(R(w) @ p)/dw for each point p, with R = rotation_exp(w) precomputed.

    Uses the closed form for the derivative of the exponential map in
    exponential coordinates; falls back to the w -> 0 limit -R [p]x.
    """
    pts = np.atleast_2d(pts)
    S = np.zeros((pts.shape[0], 3, 3))
    S[:, 0, 1] = -pts[:, 2]
    S[:, 0, 2] = pts[:, 1]
    S[:, 1, 0] = pts[:, 2]
    S[:, 1, 2] = -pts[:, 0]
    S[:, 2, 0] = -pts[:, 1]
    S[:, 2, 1] = pts[:, 0]
    theta2 = float(w @ w)
    if theta2 < 1e-16:
        M = np.eye(3)
    else:
        M = (np.outer(w, w) + (R.T - np.eye(3)) @ skew(w)) / theta2
    return -np.einsum("ab,nbc,cd->nad", R, S, M)


def _pose_observation_blocks(w, R, t, intrinsics, pts):
    """Vectorized projection + Jacobian blocks for points seen by one pose.

    Returns (uv, z, Jc, Jp) with Jc (n, 2, 6) over (axis-angle, translation)
    and Jp (n, 2, 3) over the point coordinates. Entries with z <= MIN_DEPTH
    are left for the caller to clamp.
    """
    pts = np.atleast_2d(pts)
    x_cam = pts @ R.T + t
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    safe_z = np.where(z > MIN_DEPTH, z, 1.0)
    iz = 1.0 / safe_z
    fx, fy, sk = intrinsics.fx, intrinsics.fy, intrinsics.skew
    uv = np.stack([(fx * x + sk * y) * iz + intrinsics.cx,
                   fy * y * iz + intrinsics.cy], axis=1)
    A = np.zeros((pts.shape[0], 2, 3))
    A[:, 0, 0] = fx * iz
    A[:, 0, 1] = sk * iz
    A[:, 0, 2] = -(fx * x + sk * y) * iz * iz
    A[:, 1, 1] = fy * iz
    A[:, 1, 2] = -fy * y * iz * iz
    Dw = rotation_action_jacobian(w, R, pts)
    Jc = np.concatenate([np.einsum("nij,njk->nik", A, Dw), A], axis=2)
    Jp = np.einsum("nij,jk->nik", A, R)
    return uv, z, Jc, Jp


@dataclass
class BAJacobian:
    """Block-sparse Jacobian of the reprojection residuals."""

    pose_blocks: np.ndarray    # (m, 2, 6)
    point_blocks: np.ndarray   # (m, 2, 3)
    obs_pose: np.ndarray
    obs_point: np.ndarray
    n_poses: int
    n_points: int
    invalid: np.ndarray        # (m,) observations behind a camera
    first_pose_fixed: bool

    def to_dense(self) -> np.ndarray:
        m = self.obs_pose.size
        n = 6 * self.n_poses + 3 * self.n_points
        J = np.zeros((m, 2, n))
        rows = np.arange(m)[:, None]
        cols_c = (6 * self.obs_pose)[:, None] + np.arange(6)[None, :]
        cols_p = (6 * self.n_poses + 3 * self.obs_point)[:, None] \
            + np.arange(3)[None, :]
        for r in (0, 1):
            J[rows, r, cols_c] = self.pose_blocks[:, r, :]
            J[rows, r, cols_p] = self.point_blocks[:, r, :]
        return J.reshape(2 * m, n)


def _evaluate(rvecs, tvecs, points, intrinsics, obs_pose, obs_point, obs_uv,
              fix_first_pose):
    """Residuals (predicted - observed) and Jacobian blocks at a state."""
    m = obs_pose.size
    r = np.zeros((m, 2))
    Jc = np.zeros((m, 2, 6))
    Jp = np.zeros((m, 2, 3))
    invalid = np.zeros(m, dtype=bool)
    for p in range(rvecs.shape[0]):
        sel = np.flatnonzero(obs_pose == p)
        if sel.size == 0:
            continue
        R = rotation_exp(rvecs[p])
        uv, z, jc, jp = _pose_observation_blocks(
            rvecs[p], R, tvecs[p], intrinsics, points[obs_point[sel]])
        bad = z <= MIN_DEPTH
        res = uv - obs_uv[sel]
        res[bad] = BEHIND_RESIDUAL
        jc[bad] = 0.0
        jp[bad] = 0.0
        r[sel] = res
        Jc[sel] = jc
        Jp[sel] = jp
        invalid[sel] = bad
    if fix_first_pose:
        Jc[obs_pose == 0] = 0.0
    return r, Jc, Jp, invalid


def residuals_and_jacobian(problem: BAProblem, fix_first_pose: bool = True):
    """Residual vector (2 per observation, ordered by observation index) and
    the block-sparse Jacobian. Gauge columns (pose 0) are zeroed when
    ``fix_first_pose``; observations behind a camera contribute clamped
    residuals with zeroed derivative blocks and are flagged."""
    rvecs = np.array([rotation_log(p.R) for p in problem.poses])
    tvecs = np.array([p.t for p in problem.poses])
    r, Jc, Jp, invalid = _evaluate(
        rvecs, tvecs, problem.points, problem.intrinsics,
        problem.obs_pose, problem.obs_point, problem.obs_uv, fix_first_pose)
    jac = BAJacobian(pose_blocks=Jc, point_blocks=Jp,
                     obs_pose=problem.obs_pose, obs_point=problem.obs_point,
                     n_poses=len(problem.poses),
                     n_points=problem.points.shape[0],
                     invalid=invalid, first_pose_fixed=fix_first_pose)
    return r.ravel(), jac


class _SchurStructure:
    """Index bookkeeping for the reduced camera system; built once per run."""

    def __init__(self, obs_pose, obs_point, n_poses, n_points):
        self.P = n_poses
        self.N = n_points
        self.pose_order = np.argsort(obs_pose, kind="stable")
        self.point_order = np.argsort(obs_point, kind="stable")
        sp = obs_pose[self.pose_order]
        sq = obs_point[self.point_order]
        self.pose_starts = np.flatnonzero(np.r_[True, sp[1:] != sp[:-1]])
        self.point_starts = np.flatnonzero(np.r_[True, sq[1:] != sq[:-1]])
        self.pose_ids = sp[self.pose_starts]
        self.point_ids = sq[self.point_starts]

        # All ordered observation pairs sharing a point, for W V^-1 W^T.
        ends = np.r_[self.point_starts[1:], sq.size]
        pa, pb = [], []
        for s, e in zip(self.point_starts, ends):
            grp = self.point_order[s:e]
            k = grp.size
            pa.append(np.repeat(grp, k))
            pb.append(np.tile(grp, k))
        self.pair_a = np.concatenate(pa) if pa else np.zeros(0, dtype=np.intp)
        self.pair_b = np.concatenate(pb) if pb else np.zeros(0, dtype=np.intp)
        key = obs_pose[self.pair_a] * n_poses + obs_pose[self.pair_b]
        self.pair_sort = np.argsort(key, kind="stable")
        skey = key[self.pair_sort]
        self.key_starts = np.flatnonzero(np.r_[True, skey[1:] != skey[:-1]])
        self.key_pose_a = (skey[self.key_starts] // n_poses).astype(np.intp)
        self.key_pose_b = (skey[self.key_starts] % n_poses).astype(np.intp)

    def sum_by_pose(self, values):
        out = np.zeros((self.P,) + values.shape[1:])
        if values.shape[0]:
            sums = np.add.reduceat(values[self.pose_order],
                                   self.pose_starts, axis=0)
            out[self.pose_ids] = sums
        return out

    def sum_by_point(self, values):
        out = np.zeros((self.N,) + values.shape[1:])
        if values.shape[0]:
            sums = np.add.reduceat(values[self.point_order],
                                   self.point_starts, axis=0)
            out[self.point_ids] = sums
        return out


def _damp(blocks, lam):
    d = np.einsum("nii->ni", blocks).copy()
    damped = blocks.copy()
    idx = np.arange(blocks.shape[1])
    damped[:, idx, idx] += lam * np.maximum(d, DAMPING_FLOOR)
    return damped


def _solve_normal_equations(r, Jc, Jp, obs_pose, obs_point, n_poses, n_points,
                            lam, struct: _SchurStructure | None):
    """One damped normal-equation solve; returns (delta_poses, delta_points)."""
    n_params = 6 * n_poses + 3 * n_points
    if struct is None:
        # Dense path for small systems.
        m = obs_pose.size
        J = np.zeros((m, 2, n_params))
        rows = np.arange(m)[:, None]
        cols_c = (6 * obs_pose)[:, None] + np.arange(6)[None, :]
        cols_p = (6 * n_poses + 3 * obs_point)[:, None] + np.arange(3)[None, :]
        for k in (0, 1):
            J[rows, k, cols_c] = Jc[:, k, :]
            J[rows, k, cols_p] = Jp[:, k, :]
        J = J.reshape(2 * m, n_params)
        A = J.T @ J
        diag = np.diag_indices_from(A)
        A[diag] += lam * np.maximum(A[diag], DAMPING_FLOOR)
        delta = np.linalg.solve(A, -(J.T @ r.reshape(-1)))
        return (delta[:6 * n_poses].reshape(n_poses, 6),
                delta[6 * n_poses:].reshape(n_points, 3))

    U = struct.sum_by_pose(np.einsum("mia,mib->mab", Jc, Jc))
    V = struct.sum_by_point(np.einsum("mia,mib->mab", Jp, Jp))
    W = np.einsum("mia,mib->mab", Jc, Jp)
    g_c = struct.sum_by_pose(np.einsum("mia,mi->ma", Jc, r))
    g_p = struct.sum_by_point(np.einsum("mia,mi->ma", Jp, r))

    U_d = _damp(U, lam)
    V_inv = np.linalg.inv(_damp(V, lam))
    Y = np.einsum("mab,mbc->mac", W, V_inv[obs_point])   # (m, 6, 3)

    P = n_poses
    S = np.zeros((P, P, 6, 6))
    S[np.arange(P), np.arange(P)] = U_d
    if struct.pair_a.size:
        contrib = np.einsum("pab,pcb->pac",
                            Y[struct.pair_a], W[struct.pair_b])
        contrib = contrib[struct.pair_sort]
        sums = np.add.reduceat(contrib, struct.key_starts, axis=0)
        np.subtract.at(S, (struct.key_pose_a, struct.key_pose_b), sums)
    S = S.transpose(0, 2, 1, 3).reshape(6 * P, 6 * P)

    rhs = -g_c + struct.sum_by_pose(
        np.einsum("mab,mb->ma", Y, g_p[obs_point]))
    delta_c = np.linalg.solve(S, rhs.reshape(-1)).reshape(P, 6)

    wt_dc = struct.sum_by_point(
        np.einsum("mab,ma->mb", W, delta_c[obs_pose]))
    delta_p = -np.einsum("nab,nb->na", V_inv, g_p + wt_dc)
    return delta_c, delta_p


def _per_view_mean_error(r, obs_pose, n_poses):
    err = np.linalg.norm(r, axis=1)
    out = np.zeros(n_poses)
    counts = np.bincount(obs_pose, minlength=n_poses)
    sums = np.bincount(obs_pose, weights=err, minlength=n_poses)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out


def optimize(problem: BAProblem, max_iters: int = 100, tol: float = 1e-8,
             fix_first_pose: bool = True,
             dense_param_limit: int = DENSE_PARAM_LIMIT):
    """Levenberg-Marquardt refinement of all poses and points.

    Solves (J^T J + lambda diag(J^T J)) delta = -J^T r each iteration,
    multiplying lambda by 10 on a rejected step and by 0.1 on an accepted
    one (only strict cost decreases are accepted). Stops on relative cost
    change < tol, gradient infinity-norm < 1e-10, or ``max_iters`` attempted
    steps. Raises :class:`DivergedError` when lambda exceeds 1e12 without a
    single accepted step. Returns ``(refined_problem, report)``.
    """
    m = problem.n_observations
    if m == 0:
        raise ValueError("problem has no observations")
    n_poses = len(problem.poses)
    n_points = problem.points.shape[0]
    n_params = 6 * n_poses + 3 * n_points
    struct = (None if n_params <= dense_param_limit else
              _SchurStructure(problem.obs_pose, problem.obs_point,
                              n_poses, n_points))

    rvecs = np.array([rotation_log(p.R) for p in problem.poses])
    tvecs = np.array([p.t.copy() for p in problem.poses])
    points = problem.points.copy()
    op, oq, uv = problem.obs_pose, problem.obs_point, problem.obs_uv

    r, Jc, Jp, _ = _evaluate(rvecs, tvecs, points, problem.intrinsics,
                             op, oq, uv, fix_first_pose)
    cost = float(np.sum(r * r))
    per_view_before = _per_view_mean_error(r, op, n_poses)
    initial_rmse = np.sqrt(cost / m)

    def grad_inf(r, Jc, Jp):
        g_c = np.einsum("mia,mi->ma", Jc, r)
        g_p = np.einsum("mia,mi->ma", Jp, r)
        gc = np.zeros((n_poses, 6))
        gp = np.zeros((n_points, 3))
        np.add.at(gc, op, g_c)
        np.add.at(gp, oq, g_p)
        return max(np.abs(gc).max(initial=0.0), np.abs(gp).max(initial=0.0))

    lam = LAMBDA0
    iterations = 0
    cost_floor = m * COST_FLOOR_PX ** 2
    converged = cost <= cost_floor or grad_inf(r, Jc, Jp) < GRAD_TOL
    accepted_any = False

    while not converged and iterations < max_iters:
        iterations += 1
        try:
            d_c, d_p = _solve_normal_equations(
                r, Jc, Jp, op, oq, n_poses, n_points, lam, struct)
        except np.linalg.LinAlgError:
            d_c = d_p = None
        if d_c is not None:
            if fix_first_pose:
                d_c[0] = 0.0
            rv_t = rvecs + d_c[:, :3]
            tv_t = tvecs + d_c[:, 3:]
            # Wrap axis-angle back into [0, pi] so the parameterization
            # stays well-conditioned.
            rv_t = np.array([rotation_log(rotation_exp(v)) for v in rv_t])
            pt_t = points + d_p
            r_t, Jc_t, Jp_t, _ = _evaluate(
                rv_t, tv_t, pt_t, problem.intrinsics, op, oq, uv,
                fix_first_pose)
            cost_t = float(np.sum(r_t * r_t))
        else:
            cost_t = np.inf
        if cost_t < cost:
            rel_change = (cost - cost_t) / max(cost, np.finfo(float).tiny)
            rvecs, tvecs, points = rv_t, tv_t, pt_t
            r, Jc, Jp = r_t, Jc_t, Jp_t
            cost = cost_t
            lam = max(lam * 0.1, 1e-12)
            accepted_any = True
            if (rel_change < tol or cost <= cost_floor
                    or grad_inf(r, Jc, Jp) < GRAD_TOL):
                converged = True
        else:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                if not accepted_any:
                    raise DivergedError(
                        f"no step accepted before lambda reached {lam:.1e}")
                break

    poses = [CameraPose(R=rotation_exp(rvecs[i]), t=tvecs[i])
             for i in range(n_poses)]
    if fix_first_pose:
        poses[0] = CameraPose(R=problem.poses[0].R.copy(),
                              t=problem.poses[0].t.copy())
    refined = BAProblem(poses=poses, points=points,
                        intrinsics=problem.intrinsics,
                        obs_pose=op, obs_point=oq, obs_uv=uv)
    report = BAReport(initial_rmse_px=float(initial_rmse),
                      final_rmse_px=float(np.sqrt(cost / m)),
                      iterations=iterations, converged=bool(converged),
                      per_view_before=per_view_before,
                      per_view_after=_per_view_mean_error(r, op, n_poses),
                      n_observations=m)
    log.debug("BA: rmse %.4f -> %.4f px in %d iterations (converged=%s)",
              report.initial_rmse_px, report.final_rmse_px,
              iterations, converged)
    return refined, report
