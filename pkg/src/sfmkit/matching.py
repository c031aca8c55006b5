"""Descriptor matching and fundamental-matrix estimation.

Brute-force Euclidean matching with Lowe's ratio test and a mutual-best
cross-check, Hartley point normalization, the normalized 8-point algorithm,
and RANSAC geometric verification scored by Sampson distance.

Epipolar convention: correspondences (p_left, p_right) satisfy
``hom(p_right)^T @ F @ hom(p_left) = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import smallest_singular_vector, to_homogeneous
from .errors import (
    DegenerateConfigurationError,
    DegeneratePointsError,
    EmptyInputError,
    InsufficientMatchesError,
    InsufficientPointsError,
    NoConsensusError,
)

RANK_DEFICIENT_TOL = 1e-10   # sigma_8 / sigma_1 below this => ambiguous nullspace
MIN_CONSENSUS = 15


@dataclass
class Match:
    """One putative correspondence between two keypoint lists."""

    idx_left: int
    idx_right: int
    distance: float


@dataclass
class RansacConfig:
    max_iterations: int = 2000
    inlier_threshold_px: float = 1.5
    confidence: float = 0.999
    rng_seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier_threshold_px must be > 0")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


def match_descriptors(desc_left: np.ndarray, desc_right: np.ndarray,
                      ratio: float = 0.75,
                      stats: dict | None = None) -> list[Match]:
    """Exhaustive nearest-neighbor matching with ratio test and cross-check.

    A left descriptor matches its nearest right neighbor iff
    d1 < ratio * d2 against the second-nearest, and the pairing is
    mutual-best in both directions (which enforces one-to-one). When
    ``stats`` is given, ``stats["ratio_matches"]`` receives the count before
    the cross-check (comparable to one-directional putative counts).
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    a = np.asarray(desc_left, dtype=np.float64)
    b = np.asarray(desc_right, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptyInputError("descriptor set is empty")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("descriptor arrays must be 2-D with equal width")

    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)

    if b.shape[0] < 2:
        # No second neighbor to test against; nothing can pass the ratio test.
        if stats is not None:
            stats["ratio_matches"] = 0
        return []
    near2 = np.argpartition(dist, 1, axis=1)[:, :2]
    rows = np.arange(a.shape[0])
    d_near2 = dist[rows[:, None], near2]
    order = np.argsort(d_near2, axis=1, kind="stable")
    best = near2[rows, order[:, 0]]
    d1 = d_near2[rows, order[:, 0]]
    d2nd = d_near2[rows, order[:, 1]]

    passed = d1 < ratio * d2nd
    if stats is not None:
        stats["ratio_matches"] = int(passed.sum())
    col_best = np.argmin(dist, axis=0)
    mutual = passed & (col_best[best] == rows)
    return [Match(int(i), int(best[i]), float(d1[i]))
            for i in np.flatnonzero(mutual)]


def normalization_transform(points: np.ndarray) -> np.ndarray:
    """Similarity T moving the centroid to the origin and the mean distance
    from it to sqrt(2). Works for 2-D or 3-D points (target sqrt(dim))."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InsufficientPointsError("need at least 2 points to normalize")
    dim = pts.shape[1]
    centroid = pts.mean(axis=0)
    dbar = float(np.linalg.norm(pts - centroid, axis=1).mean())
    if dbar <= 1e-12:
        raise DegeneratePointsError("all points coincide")
    s = np.sqrt(dim) / dbar
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * centroid
    return T


def estimate_fundamental_8pt(pts_left: np.ndarray,
                             pts_right: np.ndarray) -> np.ndarray:
    """Normalized 8-point estimate of F (rank 2, unit Frobenius norm).

    Both point sets are Hartley-normalized, the stacked Kronecker system
    G f = 0 is solved by SVD nullspace, the smallest singular value of the
    reshaped F is zeroed, and the normalization is undone via
    F = T_right^T @ F_norm @ T_left.
    """
    pl = np.asarray(pts_left, dtype=np.float64)
    pr = np.asarray(pts_right, dtype=np.float64)
    if pl.shape != pr.shape or pl.ndim != 2 or pl.shape[1] != 2:
        raise ValueError("expected matching (n, 2) point arrays")
    n = pl.shape[0]
    if n < 8:
        raise InsufficientPointsError(f"need >= 8 correspondences, got {n}")
    T1 = normalization_transform(pl)
    T2 = normalization_transform(pr)
    hl = to_homogeneous(pl) @ T1.T
    hr = to_homogeneous(pr) @ T2.T

    # Row i is kron(hr_i, hl_i) so that G @ vec_rowmajor(F) stacks
    # hr_i^T F hl_i over all correspondences.
    G = (hr[:, :, None] * hl[:, None, :]).reshape(n, 9)
    sv = np.linalg.svd(G, compute_uv=False)
    if sv[7] < RANK_DEFICIENT_TOL * sv[0]:
        raise DegenerateConfigurationError(
            "correspondences are degenerate (ambiguous nullspace)")
    f, _ = smallest_singular_vector(G)
    F = f.reshape(3, 3)
    u, s, vt = np.linalg.svd(F)
    F = u @ np.diag([s[0], s[1], 0.0]) @ vt
    F = T2.T @ F @ T1
    F /= np.linalg.norm(F)
    i, j = np.unravel_index(np.argmax(np.abs(F)), F.shape)
    if F[i, j] < 0:
        F = -F
    return F


def sampson_distance(F: np.ndarray, pts_left: np.ndarray,
                     pts_right: np.ndarray) -> np.ndarray:
    """First-order geometric distance (pixels) of each correspondence to the
    epipolar constraint hr^T F hl = 0."""
    hl = to_homogeneous(np.asarray(pts_left, dtype=np.float64))
    hr = to_homogeneous(np.asarray(pts_right, dtype=np.float64))
    Fl = hl @ F.T          # rows F @ hl_i
    Ftr = hr @ F           # rows F^T @ hr_i
    e = np.sum(hr * Fl, axis=1)
    denom = Fl[:, 0] ** 2 + Fl[:, 1] ** 2 + Ftr[:, 0] ** 2 + Ftr[:, 1] ** 2
    out = np.full(e.shape, np.inf)
    ok = denom > 0
    out[ok] = np.abs(e[ok]) / np.sqrt(denom[ok])
    return out


def _match_coordinates(matches, kps_left, kps_right):
    from .sift import Keypoint  # local import to avoid cycle at module load

    def coords(kps, idx):
        if len(kps) and isinstance(kps[0], Keypoint):
            return np.array([[kps[i].x, kps[i].y] for i in idx])
        arr = np.asarray(kps, dtype=np.float64)
        return arr[idx]

    il = [m.idx_left for m in matches]
    ir = [m.idx_right for m in matches]
    return coords(kps_left, il), coords(kps_right, ir)


def ransac_fundamental(matches: list[Match], kps_left, kps_right,
                       cfg: RansacConfig | None = None):
    """RANSAC over minimal 8-point samples, scored by Sampson distance.

    The iteration cap adapts from the running inlier ratio and the requested
    confidence. The best model is re-estimated on its full inlier set and
    inliers are re-scored against the refit. Returns ``(F, inlier_indices)``
    with indices into ``matches``, sorted ascending.
    """
    cfg = cfg or RansacConfig()
    n = len(matches)
    if n < 8:
        raise InsufficientMatchesError(f"need >= 8 matches, got {n}")
    if n < MIN_CONSENSUS:
        # Even a perfect model cannot reach the consensus floor.
        raise NoConsensusError(
            f"only {n} matches; consensus floor is {MIN_CONSENSUS}")
    pl, pr = _match_coordinates(matches, kps_left, kps_right)
    rng = np.random.default_rng(cfg.rng_seed)

    best_count = 0
    best_mask = None
    best_F = None
    max_iters = cfg.max_iterations
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = estimate_fundamental_8pt(pl[sample], pr[sample])
        except (DegenerateConfigurationError, DegeneratePointsError):
            continue
        d = sampson_distance(F, pl, pr)
        mask = d < cfg.inlier_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_F = count, mask, F
            w = count / n
            if w >= 1.0:
                break
            denom = np.log1p(-min(w ** 8, 1.0 - 1e-16))
            if denom < 0:
                needed = int(np.ceil(np.log1p(-cfg.confidence) / denom))
                max_iters = min(cfg.max_iterations, max(needed, 1))

    if best_count < MIN_CONSENSUS:
        raise NoConsensusError(
            f"best consensus {best_count} < {MIN_CONSENSUS} of {n} matches")
    try:
        F = estimate_fundamental_8pt(pl[best_mask], pr[best_mask])
        d = sampson_distance(F, pl, pr)
        mask = d < cfg.inlier_threshold_px
        if int(mask.sum()) >= best_count:
            best_F, best_mask = F, mask
    except (DegenerateConfigurationError, DegeneratePointsError):
        pass
    return best_F, [int(i) for i in np.flatnonzero(best_mask)]
