"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all luxtree errors."""


class EmptyCloud(ToolkitError):
    """Point cloud has no valid points."""


class PointOutOfUnitCube(ToolkitError):
    """A point fed to the octree builder lies outside [0,1]^3."""


class SizeMismatch(ToolkitError):
    """Paired images/arrays disagree in shape."""


class NoValidPixels(ToolkitError):
    """Backprojection found no finite, positive depth pixels."""


class DegenerateSchedule(ToolkitError):
    """Cone sampling schedule would produce an absurd number of steps."""


class ShapeMismatch(ToolkitError):
    """Metric inputs disagree in shape."""


class DepthMismatch(ToolkitError):
    """Octrees compared at different max depths."""


class EmptyMask(ToolkitError):
    """A masked metric was given an all-false mask."""


class NegativeInput(ToolkitError):
    """Log-domain metric fed values < 0."""


class OutsideBBox(ToolkitError):
    """Shading point lies outside the octree's world bounding box."""


class NoViews(ToolkitError):
    """Fitter called with an empty view list."""


class DivergenceDetected(ToolkitError):
    """Fit loss exploded past the divergence guard."""


class BadMagic(ToolkitError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersion(ToolkitError):
    """File version not understood by this reader."""


class UnsupportedEndianness(ToolkitError):
    """Big-endian variant of a format this toolkit does not write."""
