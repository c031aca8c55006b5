"""sfmkit: incremental structure-from-motion toolkit.

Reconstructs camera poses and a sparse 3D point cloud from an unordered
grayscale image collection with known intrinsics. Stages: SIFT feature
detection, descriptor matching with epipolar verification, two-view
bootstrap, incremental PnP registration with triangulation, and bundle
adjustment. The :mod:`sfmkit.cli` module exposes the same stages as a
command-line tool.
"""

from . import errors
from .core import (
    from_homogeneous,
    rotation_exp,
    rotation_log,
    rq_decompose,
    skew,
    smallest_singular_vector,
    to_homogeneous,
)
from .image import gaussian_blur, half_sample, load_image
from .sift import Keypoint, SiftParams, detect_features
from .matching import Match, RansacConfig, match_descriptors, ransac_fundamental
from .twoview import CameraIntrinsics, CameraPose
from .ba import BAProblem, BAReport, optimize
from .pipeline import (
    PipelineConfig,
    ReconstructionState,
    Track,
    detect_all,
    match_image_pairs,
    reconstruct,
    run_incremental_sfm,
)

__version__ = "0.1.0"
