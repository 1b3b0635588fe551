"""Exception types raised across the toolkit.

Everything derives from ValueError so callers that do not care about the
specific failure can catch one base class.
"""


class DegeneratePair(ValueError):
    """Contact points coincide (separation below 1e-6 m)."""


class ParallelApproach(ValueError):
    """Approach direction is parallel to the grasp axis."""


class BehindCamera(ValueError):
    """Point has non-positive depth in the camera frame."""


class DimensionMismatch(ValueError):
    """Array shape does not match the volume or image dimensions."""


class OutOfBounds(ValueError):
    """Query point lies outside the sampleable region of a volume."""


class EmptyVolume(ValueError):
    """Volume contains no observed voxels."""


class NonUnitInput(ValueError):
    """Vector expected to be unit length is not (tolerance 1e-6)."""


class DegenerateGraspVector(ValueError):
    """Grasp direction is not unit length (tolerance 1e-6)."""


class MissingShapeLabels(ValueError):
    """A scene shape has no per-shape label set to transfer."""
