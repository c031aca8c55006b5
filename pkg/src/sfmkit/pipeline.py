"""Incremental reconstruction driver.

Feature detection and pairwise matching feed a union-find track builder;
the best verified pair bootstraps the world frame (first camera at
[I | 0], unit baseline); remaining views register greedily through
PnP; new tracks are triangulated from all registered observations; bundle
adjustment runs every few registrations and once globally at the end, with
track refiltering after every pass.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ba import BAProblem, BAReport, optimize
from .errors import (
    CheiralityAmbiguousError,
    CoincidentPointError,
    EmptyInputError,
    InsufficientPointsError,
    NoConsensusError,
    NoRegistrableViewError,
    NoValidPairError,
    PointAtInfinityError,
    ZeroBaselineError,
)
from .image import sample_intensity
from .matching import Match, RansacConfig, match_descriptors, ransac_fundamental
from .resection import pnp_ransac
from .sift import Keypoint, SiftParams, detect_features
from .twoview import (
    CameraIntrinsics,
    CameraPose,
    decompose_essential,
    essential_from_fundamental,
    normalized_coordinates,
    select_pose_cheirality,
    triangulate_multiview,
    triangulation_angle,
)

log = logging.getLogger(__name__)

STATUS_CANDIDATE = "candidate"
STATUS_TRIANGULATED = "triangulated"
STATUS_REJECTED = "rejected"


@dataclass
class PipelineConfig:
    """Every knob of the incremental loop, with working defaults."""

    sift: SiftParams = field(default_factory=SiftParams)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    ratio: float = 0.75
    min_init_inliers: int = 100
    min_triangulation_angle_deg: float = 2.0
    max_reproj_px: float = 4.0
    local_ba_interval: int = 3
    min_pnp_correspondences: int = 12
    ba_tol: float = 1e-8
    local_ba_max_iters: int = 25
    final_ba_max_iters: int = 100

    def __post_init__(self):
        for name in ("ratio", "min_init_inliers", "min_triangulation_angle_deg",
                     "max_reproj_px", "local_ba_interval",
                     "min_pnp_correspondences"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Track:
    """One scene point: its observations (image index, keypoint index) and,
    once triangulated, its 3D position."""

    observations: list[tuple[int, int]]
    point3d: np.ndarray | None = None
    status: str = STATUS_CANDIDATE
    intensity: float = 0.5

    def observed_images(self):
        return [img for img, _ in self.observations]


@dataclass
class PairResult:
    """Verified matching result for one image pair."""

    matches: list[Match]
    inlier_idx: list[int]
    F: np.ndarray | None
    ratio_matches: int = 0

    @property
    def n_putative(self) -> int:
        return len(self.matches)

    @property
    def n_inliers(self) -> int:
        return len(self.inlier_idx)


@dataclass
class ReconstructionState:
    """Evolving model: registered poses, live tracks, pairwise geometry."""

    intrinsics: CameraIntrinsics
    keypoints: dict[int, list[Keypoint]] = field(default_factory=dict)
    poses: dict[int, CameraPose] = field(default_factory=dict)
    tracks: list[Track] = field(default_factory=list)
    pairwise: dict[tuple[int, int], PairResult] = field(default_factory=dict)
    registered: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)
    image_names: dict[int, str] = field(default_factory=dict)
    per_view_errors: dict[int, tuple[float, float]] = field(default_factory=dict)

    def n_triangulated(self) -> int:
        return sum(1 for t in self.tracks if t.status == STATUS_TRIANGULATED)

    def keypoint_xy(self, img: int, kp_idx: int) -> np.ndarray:
        kp = self.keypoints[img][kp_idx]
        return np.array([kp.x, kp.y])


# --- feature detection and matching stages ---

def detect_all(images, params: SiftParams | None = None, threads: int = 1):
    """SIFT on every image; returns a list of (keypoints, descriptors)."""
    params = params or SiftParams()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda im: detect_features(im, params), images))
    return [detect_features(im, params) for im in images]


def match_image_pairs(features, ratio: float = 0.75,
                      ransac_cfg: RansacConfig | None = None,
                      threads: int = 1):
    """Match every image pair (i < j) and verify epipolar geometry.

    Pairs with under 8 putative matches, or without RANSAC consensus, are
    kept with an empty inlier list so reports still count their putatives.
    """
    ransac_cfg = ransac_cfg or RansacConfig()
    n = len(features)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def work(pair):
        i, j = pair
        kps_i, desc_i = features[i]
        kps_j, desc_j = features[j]
        stats: dict = {}
        try:
            matches = match_descriptors(desc_i, desc_j, ratio, stats=stats)
        except EmptyInputError:
            return PairResult([], [], None, 0)
        ratio_matches = stats.get("ratio_matches", 0)
        if len(matches) < 8:
            return PairResult(matches, [], None, ratio_matches)
        try:
            F, inliers = ransac_fundamental(matches, kps_i, kps_j, ransac_cfg)
        except (NoConsensusError, InsufficientPointsError):
            return PairResult(matches, [], None, ratio_matches)
        return PairResult(matches, inliers, F, ratio_matches)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    return dict(zip(pairs, results))


# --- track building ---

class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        root = a
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[a] != root:   # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_tracks(pairwise: dict) -> list[Track]:
    """Union-find over (image, keypoint) nodes joined by verified inlier
    matches. Groups with two keypoints in one image are kept but marked
    rejected; only groups spanning >= 2 images become candidate tracks."""
    uf = _UnionFind()
    for (i, j) in sorted(pairwise):
        pr = pairwise[(i, j)]
        for m_idx in pr.inlier_idx:
            m = pr.matches[m_idx]
            uf.union((i, m.idx_left), (j, m.idx_right))
    groups: dict = {}
    for node in sorted(uf.parent):
        groups.setdefault(uf.find(node), []).append(node)
    tracks = []
    for root in sorted(groups):
        obs = sorted(groups[root])
        if len(obs) < 2:
            continue
        images = [img for img, _ in obs]
        status = STATUS_REJECTED if len(set(images)) < len(images) \
            else STATUS_CANDIDATE
        tracks.append(Track(observations=obs, status=status))
    return tracks


def _track_intensities(tracks, images, keypoints):
    for tr in tracks:
        vals = [sample_intensity(images[img],
                                 keypoints[img][kp].x, keypoints[img][kp].y)
                for img, kp in tr.observations]
        tr.intensity = float(np.mean(vals)) if vals else 0.5


# --- geometric steps ---

def _pair_correspondences(state: ReconstructionState, pair):
    i, j = pair
    pr = state.pairwise[pair]
    pl = np.array([state.keypoint_xy(i, pr.matches[k].idx_left)
                   for k in pr.inlier_idx])
    p_r = np.array([state.keypoint_xy(j, pr.matches[k].idx_right)
                    for k in pr.inlier_idx])
    return pl, p_r


def _trial_two_view(state: ReconstructionState, pair, cfg: PipelineConfig):
    """Relative pose for a pair plus the median triangulation angle of its
    inliers; returns None when the geometry is degenerate."""
    pr = state.pairwise[pair]
    if pr.F is None or not pr.inlier_idx:
        return None
    pl, p_r = _pair_correspondences(state, pair)
    E = essential_from_fundamental(pr.F, state.intrinsics)
    candidates = decompose_essential(E)
    xl = normalized_coordinates(pl, state.intrinsics)
    xr = normalized_coordinates(p_r, state.intrinsics)
    try:
        pose = select_pose_cheirality(candidates, xl, xr)
    except CheiralityAmbiguousError:
        return None
    M_l = np.hstack([np.eye(3), np.zeros((3, 1))])
    M_r = pose.matrix34()
    c2 = pose.center
    angles = []
    for a in range(xl.shape[0]):
        try:
            P = triangulate_multiview([xl[a], xr[a]], [M_l, M_r])
        except PointAtInfinityError:
            continue
        if P[2] <= 0 or (pose.R[2] @ P + pose.t[2]) <= 0:
            continue
        try:
            angles.append(triangulation_angle(P, np.zeros(3), c2))
        except CoincidentPointError:
            continue
    if not angles:
        return None
    return pose, float(np.median(angles))


def select_initial_pair(state: ReconstructionState, cfg: PipelineConfig):
    """Best bootstrap pair: maximum inliers among pairs above the inlier
    floor whose trial geometry clears the triangulation-angle gate."""
    scored = [(pr.n_inliers, pair) for pair, pr in state.pairwise.items()
              if pr.n_inliers >= cfg.min_init_inliers]
    scored.sort(key=lambda s: (-s[0], s[1]))
    min_angle = np.deg2rad(cfg.min_triangulation_angle_deg)
    for _, pair in scored:
        trial = _trial_two_view(state, pair, cfg)
        if trial is not None and trial[1] >= min_angle:
            return pair
    raise NoValidPairError(
        f"no pair with >= {cfg.min_init_inliers} inliers and viable geometry")


def _registered_observations(state: ReconstructionState, track: Track):
    reg = set(state.registered)
    return [(img, kp) for img, kp in track.observations if img in reg]


def _try_triangulate(state: ReconstructionState, track: Track,
                     cfg: PipelineConfig) -> bool:
    """Multi-view DLT over all registered observations, gated on depth,
    reprojection error, and triangulation angle."""
    obs = _registered_observations(state, track)
    if len(obs) < 2:
        return False
    K = state.intrinsics
    pts = [state.keypoint_xy(img, kp) for img, kp in obs]
    Ms = [state.poses[img].projection(K) for img, _ in obs]
    try:
        P = triangulate_multiview(pts, Ms)
    except (PointAtInfinityError, ZeroBaselineError):
        return False
    errs = _reprojection_errors(state, P, obs)   # None when depth <= 0
    if errs is None or max(errs) > cfg.max_reproj_px:
        return False
    centers = [state.poses[img].center for img, _ in obs]
    best_angle = 0.0
    for a in range(len(centers)):
        for b in range(a + 1, len(centers)):
            try:
                best_angle = max(best_angle, triangulation_angle(
                    P, centers[a], centers[b]))
            except CoincidentPointError:
                continue
    if best_angle < np.deg2rad(cfg.min_triangulation_angle_deg):
        return False
    track.point3d = P
    track.status = STATUS_TRIANGULATED
    return True


def _reprojection_errors(state: ReconstructionState, P, obs):
    K = state.intrinsics
    errs = []
    for img, kp in obs:
        pose = state.poses[img]
        x = pose.R @ P + pose.t
        if x[2] <= 1e-9:
            return None
        u = (K.fx * x[0] + K.skew * x[1]) / x[2] + K.cx
        v = K.fy * x[1] / x[2] + K.cy
        errs.append(float(np.hypot(*(np.array([u, v])
                                     - state.keypoint_xy(img, kp)))))
    return errs


def bootstrap(state: ReconstructionState, pair, cfg: PipelineConfig) -> int:
    """Anchor the world frame on ``pair``: first camera [I | 0], second from
    the essential decomposition with unit-norm baseline, then triangulate
    every candidate track the pair observes. Returns the triangulated count."""
    i, j = pair
    trial = _trial_two_view(state, pair, cfg)
    if trial is None:
        raise NoValidPairError(f"pair {pair} lost its geometry at bootstrap")
    pose_j = trial[0]
    t_unit = pose_j.t / np.linalg.norm(pose_j.t)
    state.poses[i] = CameraPose()
    state.poses[j] = CameraPose(R=pose_j.R, t=t_unit)
    state.registered = [i, j]
    count = 0
    for track in state.tracks:
        if track.status != STATUS_CANDIDATE:
            continue
        imgs = track.observed_images()
        if i in imgs and j in imgs:
            count += _try_triangulate(state, track, cfg)
    # Pre-bundle-adjustment error baseline for the before/after report.
    for img in (i, j):
        state.per_view_errors[img] = (_view_mean_error(state, img),
                                      float("nan"))
    log.info("bootstrap pair=(%d,%d) inliers=%d tracks=%d",
             i, j, state.pairwise[pair].n_inliers, count)
    return count


def _pnp_correspondence_counts(state: ReconstructionState):
    counts: dict[int, int] = {}
    reg = set(state.registered)
    for track in state.tracks:
        if track.status != STATUS_TRIANGULATED:
            continue
        for img, _ in track.observations:
            if img not in reg and img not in state.failed:
                counts[img] = counts.get(img, 0) + 1
    return counts


def select_next_view(state: ReconstructionState, cfg: PipelineConfig) -> int:
    """Unregistered image observing the most triangulated tracks (ties go to
    the lower index)."""
    counts = _pnp_correspondence_counts(state)
    eligible = [(n, img) for img, n in counts.items()
                if n >= cfg.min_pnp_correspondences]
    if not eligible:
        raise NoRegistrableViewError("no view has enough 2D-3D correspondences")
    eligible.sort(key=lambda e: (-e[0], e[1]))
    return eligible[0][1]


def register_view(state: ReconstructionState, idx: int,
                  cfg: PipelineConfig) -> bool:
    """PnP-register one view and triangulate the new tracks it enables.

    On RANSAC failure the view is recorded as failed and the state is left
    untouched. Observations the PnP marks as outliers are dropped from
    their tracks.
    """
    corr = []
    for t_idx, track in enumerate(state.tracks):
        if track.status != STATUS_TRIANGULATED:
            continue
        for img, kp in track.observations:
            if img == idx:
                corr.append((t_idx, kp))
    if len(corr) < cfg.min_pnp_correspondences:
        state.failed.append(idx)
        return False
    pts3 = np.array([state.tracks[t].point3d for t, _ in corr])
    pts2 = np.array([state.keypoint_xy(idx, kp) for _, kp in corr])
    pnp_cfg = RansacConfig(max_iterations=cfg.ransac.max_iterations,
                           inlier_threshold_px=cfg.max_reproj_px,
                           confidence=cfg.ransac.confidence,
                           rng_seed=cfg.ransac.rng_seed)
    try:
        pose, inliers = pnp_ransac(pts3, pts2, state.intrinsics, pnp_cfg)
    except (NoConsensusError, InsufficientPointsError) as exc:
        log.warning("view %d failed to register: %s", idx, exc)
        state.failed.append(idx)
        return False
    state.poses[idx] = pose
    state.registered.append(idx)

    inlier_set = {corr[k] for k in inliers}
    for t_idx, kp in corr:
        if (t_idx, kp) not in inlier_set:
            state.tracks[t_idx].observations = [
                (im, k) for im, k in state.tracks[t_idx].observations
                if not (im == idx and k == kp)]

    new_tracks = 0
    for track in state.tracks:
        if track.status != STATUS_CANDIDATE:
            continue
        if idx in track.observed_images():
            new_tracks += _try_triangulate(state, track, cfg)

    # Pre-bundle-adjustment error baseline for the before/after report.
    state.per_view_errors[idx] = (_view_mean_error(state, idx), float("nan"))
    errs = np.linalg.norm(
        _project_simple(state, pose, pts3[inliers]) - pts2[inliers], axis=1)
    log.info("view=%d inliers=%d mean_reproj_px=%.3f tracks=%d",
             idx, len(inliers), float(errs.mean()) if errs.size else 0.0,
             state.n_triangulated())
    return True


def _project_simple(state, pose, pts3):
    K = state.intrinsics
    x = pts3 @ pose.R.T + pose.t
    z = np.where(x[:, 2] > 1e-12, x[:, 2], 1e-12)
    return np.stack([(K.fx * x[:, 0] + K.skew * x[:, 1]) / z + K.cx,
                     K.fy * x[:, 1] / z + K.cy], axis=1)


def _view_mean_error(state: ReconstructionState, img: int) -> float:
    """Mean reprojection error of one registered view over its observations
    of triangulated tracks. Behind-camera observations count at the same
    1e4 px clamp bundle adjustment uses."""
    errs = []
    for track in state.tracks:
        if track.status != STATUS_TRIANGULATED:
            continue
        for im, kp in track.observations:
            if im == img:
                e = _reprojection_errors(state, track.point3d, [(im, kp)])
                errs.append(e[0] if e is not None else 1e4)
    return float(np.mean(errs)) if errs else 0.0


def refilter_tracks(state: ReconstructionState, cfg: PipelineConfig) -> int:
    """Drop observations that reproject worse than the threshold (or behind
    the camera); demote tracks left with < 2 registered observations."""
    dropped = 0
    for track in state.tracks:
        if track.status != STATUS_TRIANGULATED:
            continue
        P = track.point3d
        keep = []
        reg = set(state.registered)
        for img, kp in track.observations:
            if img not in reg:
                keep.append((img, kp))
                continue
            pose = state.poses[img]
            z = pose.R[2] @ P + pose.t[2]
            ok = z > 1e-9
            if ok:
                err = _reprojection_errors(state, P, [(img, kp)])
                ok = err is not None and err[0] <= cfg.max_reproj_px
            if ok:
                keep.append((img, kp))
            else:
                dropped += 1
        track.observations = keep
        if len(_registered_observations(state, track)) < 2:
            track.point3d = None
            track.status = STATUS_CANDIDATE
    return dropped


def retriangulate_candidates(state: ReconstructionState,
                             cfg: PipelineConfig) -> int:
    """Try to (re)triangulate candidate tracks with >= 2 registered
    observations; run after geometry improves so tracks that failed an
    earlier gate (or were demoted by refiltering) can come back."""
    reg = set(state.registered)
    added = 0
    for track in state.tracks:
        if track.status != STATUS_CANDIDATE:
            continue
        n_reg = sum(1 for img, _ in track.observations if img in reg)
        if n_reg >= 2:
            added += _try_triangulate(state, track, cfg)
    return added


def run_bundle_adjustment(state: ReconstructionState, cfg: PipelineConfig,
                          max_iters: int) -> BAReport:
    """Optimize all registered poses and triangulated points in place, then
    refilter the tracks against the updated geometry."""
    pose_index = {img: k for k, img in enumerate(state.registered)}
    poses = [state.poses[img] for img in state.registered]
    track_ids = [k for k, t in enumerate(state.tracks)
                 if t.status == STATUS_TRIANGULATED]
    points = np.array([state.tracks[k].point3d for k in track_ids])
    obs = []
    for q, k in enumerate(track_ids):
        for img, kp in state.tracks[k].observations:
            if img in pose_index:
                obs.append((pose_index[img], q, state.keypoint_xy(img, kp)))
    problem = BAProblem.from_observations(poses, points, state.intrinsics, obs)
    refined, report = optimize(problem, max_iters=max_iters, tol=cfg.ba_tol)
    for img, k in pose_index.items():
        state.poses[img] = refined.poses[k]
    for q, k in enumerate(track_ids):
        state.tracks[k].point3d = refined.points[q]
    refilter_tracks(state, cfg)
    # "before" stays the registration-time (pre-any-BA) baseline; "after"
    # tracks the latest refined geometry, so the pair reproduces the
    # before/after-bundle-adjustment comparison per view.
    for img in pose_index:
        before = state.per_view_errors.get(
            img, (_view_mean_error(state, img), float("nan")))[0]
        state.per_view_errors[img] = (before, _view_mean_error(state, img))
    return report


# --- full drivers ---

def reconstruct(keypoints, pairwise, intrinsics: CameraIntrinsics,
                cfg: PipelineConfig | None = None, images=None,
                image_names=None):
    """Incremental reconstruction from detected keypoints and verified pairs.

    ``keypoints`` is a list (or dict) of per-image keypoint lists and
    ``pairwise`` maps (i, j) with i < j to :class:`PairResult`. Returns the
    final state and the list of bundle-adjustment reports (global last).
    """
    cfg = cfg or PipelineConfig()
    kp_map = dict(enumerate(keypoints)) if isinstance(keypoints, list) \
        else dict(keypoints)
    state = ReconstructionState(intrinsics=intrinsics, keypoints=kp_map,
                                pairwise=dict(pairwise))
    if image_names:
        state.image_names = dict(image_names) if isinstance(image_names, dict) \
            else dict(enumerate(image_names))
    else:
        state.image_names = {i: f"{i:05d}" for i in kp_map}
    state.tracks = build_tracks(state.pairwise)
    if images is not None:
        _track_intensities(state.tracks, images, kp_map)

    pair = select_initial_pair(state, cfg)
    bootstrap(state, pair, cfg)
    reports: list[BAReport] = []
    # Two-view refinement right after bootstrap: a short-baseline pair can
    # leave the essential-matrix pose a few pixels off, which the
    # reprojection gate would otherwise turn into a starved track set.
    reports.append(run_bundle_adjustment(state, cfg, cfg.local_ba_max_iters))
    retriangulate_candidates(state, cfg)
    since_ba = 0
    while True:
        try:
            idx = select_next_view(state, cfg)
        except NoRegistrableViewError:
            break
        if register_view(state, idx, cfg):
            since_ba += 1
            if since_ba >= cfg.local_ba_interval:
                reports.append(run_bundle_adjustment(
                    state, cfg, cfg.local_ba_max_iters))
                retriangulate_candidates(state, cfg)
                since_ba = 0
    retriangulate_candidates(state, cfg)
    reports.append(run_bundle_adjustment(state, cfg, cfg.final_ba_max_iters))
    log.info("reconstruction: %d/%d views registered, %d tracks, "
             "final rmse %.3f px",
             len(state.registered), len(kp_map), state.n_triangulated(),
             reports[-1].final_rmse_px)
    return state, reports


def run_incremental_sfm(images, intrinsics: CameraIntrinsics,
                        cfg: PipelineConfig | None = None,
                        image_names=None, threads: int = 1):
    """Full pipeline from images: detect, match, verify, reconstruct."""
    cfg = cfg or PipelineConfig()
    features = detect_all(images, cfg.sift, threads=threads)
    pairwise = match_image_pairs(features, cfg.ratio, cfg.ransac,
                                 threads=threads)
    return reconstruct([f[0] for f in features], pairwise, intrinsics, cfg,
                       images=images, image_names=image_names)
