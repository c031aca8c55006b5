import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from oracles import make_ring_scene  # noqa: E402

from sfmkit.matching import Match, RansacConfig, ransac_fundamental  # noqa: E402
from sfmkit.pipeline import PairResult  # noqa: E402
from sfmkit.sift import Keypoint  # noqa: E402
from sfmkit.twoview import CameraIntrinsics  # noqa: E402


def scene_keypoints(scene):
    """Per-camera keypoint lists: one keypoint per scene point (index-aligned)."""
    out = []
    for uv in scene["pixels"]:
        out.append([Keypoint(x=float(u), y=float(v), sigma=1.6, octave=0,
                             layer=1, orientation=0.0)
                    for u, v in uv])
    return out


def scene_pairs(scene, keypoints, seed=0):
    """Verified PairResult for every camera pair from the exact index-aligned
    correspondences (RANSAC runs on them like on real matches)."""
    n_cams = len(scene["pixels"])
    n_pts = scene["points"].shape[0]
    cfg = RansacConfig(rng_seed=seed)
    pairs = {}
    for i in range(n_cams):
        for j in range(i + 1, n_cams):
            matches = [Match(k, k, 0.0) for k in range(n_pts)]
            F, inl = ransac_fundamental(matches, keypoints[i], keypoints[j], cfg)
            pairs[(i, j)] = PairResult(matches, inl, F, n_pts)
    return pairs


@pytest.fixture(scope="session")
def ring_scene():
    return make_ring_scene(n_cameras=10, radius=3.0, n_points=200, seed=11)


@pytest.fixture(scope="session")
def corner_dataset():
    from synth_scene import make_corner_dataset

    return make_corner_dataset(n_views=8, width=480, height=360, seed=0)


@pytest.fixture(scope="session")
def ring_intrinsics(ring_scene):
    return CameraIntrinsics(fx=ring_scene["fx"], fy=ring_scene["fy"],
                            cx=ring_scene["cx"], cy=ring_scene["cy"])


@pytest.fixture(scope="session")
def ring_setup(ring_scene):
    kps = scene_keypoints(ring_scene)
    pairs = scene_pairs(ring_scene, kps)
    return kps, pairs


def temple_dir():
    """Path to the Temple Ring image directory, if available."""
    path = os.environ.get("SFMKIT_TEMPLE_DIR", "")
    if path and os.path.isdir(path):
        return path
    here = os.path.join(os.path.dirname(__file__), "..", "data", "templeRing")
    return here if os.path.isdir(here) else None


requires_temple = pytest.mark.skipif(
    temple_dir() is None,
    reason="Temple Ring dataset not available (set SFMKIT_TEMPLE_DIR or "
           "place it in data/templeRing)")
