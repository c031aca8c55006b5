"""Exception types raised by the reconstruction toolkit.

Every failure mode that callers are expected to handle gets its own class so
pipeline code can distinguish recoverable conditions (a view that fails to
register) from hard input errors (a corrupt image file).
"""


class SfmError(Exception):
    """Base class for all toolkit errors."""


# --- image loading / filtering ---

class UnsupportedFormatError(SfmError):
    """Image file is not binary PGM (P5) or 8-bit PNG."""


class CorruptFileError(SfmError):
    """Image file is truncated or violates its format spec."""


class ZeroDimensionError(SfmError):
    """Image declares a zero width or height."""


class NonPositiveSigmaError(SfmError):
    """Gaussian blur requested with sigma <= 0."""


class TooSmallImageError(SfmError):
    """Image too small for the requested operation (downsampling, pyramid)."""


# --- linear algebra ---

class SingularMatrixError(SfmError):
    """Matrix is singular where an inverse/decomposition is required."""


class AtInfinityError(SfmError):
    """Homogeneous vector has (near-)zero last component."""


# --- matching and epipolar estimation ---

class EmptyInputError(SfmError):
    """Descriptor matching called with an empty descriptor set."""


class DegeneratePointsError(SfmError):
    """Point set is degenerate (coincident / collinear / coplanar)."""


class InsufficientPointsError(SfmError):
    """Fewer correspondences than the estimator's minimum."""


class InsufficientMatchesError(InsufficientPointsError):
    """Fewer putative matches than a robust estimator needs."""


class DegenerateConfigurationError(SfmError):
    """Estimation problem has an ambiguous nullspace (e.g. collinear points)."""


class NoConsensusError(SfmError):
    """RANSAC failed to find a model with enough inliers."""


# --- two-view geometry ---

class CheiralityAmbiguousError(SfmError):
    """No essential-matrix decomposition clearly wins the depth-positivity vote."""


class ZeroBaselineError(SfmError):
    """Triangulation requested from identical projection matrices."""


class PointAtInfinityError(SfmError):
    """Triangulated point lies at (or numerically at) infinity."""


class CoincidentPointError(SfmError):
    """Triangulation-angle query with the point at a camera center."""


class BehindCameraError(SfmError):
    """Projection requested for a point with non-positive camera-frame depth."""


# --- bundle adjustment ---

class DivergedError(SfmError):
    """Damped least-squares failed to accept any step before the damping cap."""


# --- incremental pipeline ---

class NoValidPairError(SfmError):
    """No image pair qualifies for two-view bootstrap."""


class NoRegistrableViewError(SfmError):
    """No unregistered view has enough 2D-3D correspondences (normal termination)."""


# --- output / CLI ---

class EmptyCloudError(SfmError):
    """Point-cloud export requested with zero triangulated points."""


class OutputError(SfmError):
    """Failed to write an output artifact."""
