"""Exception types raised across the package."""


class RegistrationError(Exception):
    """Base class for every error raised by scregistrar."""


class NonPositiveDepth(RegistrationError, ValueError):
    pass


class PixelOutOfBounds(RegistrationError, ValueError):
    pass


class ParseError(RegistrationError, ValueError):
    pass


class DimensionMismatch(RegistrationError, ValueError):
    pass


class NonFiniteValue(RegistrationError, ValueError):
    pass


class NonPositiveSigma(RegistrationError, ValueError):
    pass


class DegenerateConfiguration(RegistrationError):
    """Correspondences do not constrain a unique pose (collinear or rank deficient)."""


class AllPointsBehindCamera(RegistrationError):
    pass


class InsufficientCorrespondences(RegistrationError):
    pass


class NoConsensus(RegistrationError):
    """RANSAC never found a hypothesis supported by a minimal sample's worth of inliers."""


class LandmarkBehindCamera(RegistrationError, ValueError):
    pass


class EmptyInput(RegistrationError, ValueError):
    pass
