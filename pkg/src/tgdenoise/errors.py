"""Exception hierarchy.

Two broad families matter to callers: :class:`DataError` for anything wrong
with inputs or files (CLI exit code 2) and :class:`NumericalError` for
runtime numerical failures (CLI exit code 3).
"""


class DataError(Exception):
    """Malformed, inconsistent, or out-of-contract input data."""


class MrcFormatError(DataError):
    """MRC header or data section violates the MRC2014 layout."""


class UnsupportedModeError(MrcFormatError):
    """MRC mode outside the supported set {0, 1, 2}."""


class TruncatedFileError(MrcFormatError):
    """Data section shorter than the header declares."""


class DimensionError(DataError):
    """Array dimensions incompatible with the requested operation."""


class LayoutError(DataError):
    """Tiles do not match the tile layout they are stitched against."""


class ParameterError(DataError):
    """Scalar parameter outside its valid range."""


class SingularNoiseError(ParameterError):
    """Conditional score requested at zero noise level."""


class InvalidNoiseMapError(DataError):
    """Spatial noise map evaluates to a non-positive sigma somewhere."""


class FrequencyError(ParameterError):
    """Spatial frequency outside (0, Nyquist]."""


class DegenerateBankError(DataError):
    """Target bank carries no usable structural variation."""


class PackingError(DataError):
    """Particle placement could not satisfy the separation constraint."""


class PhantomSpecError(DataError):
    """Phantom specification is internally inconsistent."""


class NumericalError(Exception):
    """Numerical failure at runtime (divergence, non-convergence)."""


class DivergenceError(NumericalError):
    """Iterative refinement produced non-finite values."""


class QuadratureError(NumericalError):
    """Numerical integration did not reach the requested tolerance."""
