"""Exception and warning types raised across the package."""


class TomographyError(Exception):
    """Base class for all errors raised by qdtomo."""


class OutOfDomainError(TomographyError, ValueError):
    pass


class NonInvertibleModelError(TomographyError, ValueError):
    pass


class DegenerateFitError(TomographyError, ValueError):
    """Raised when a fit has fewer than one degree of freedom."""


class ChainTooShortError(TomographyError, ValueError):
    pass


class DegenerateChainError(TomographyError, ValueError):
    """Raised when a chain has zero variance in some parameter."""


class MalformedStreamError(TomographyError, ValueError):
    pass


class EmptySettingError(TomographyError, ValueError):
    pass


class InvalidGeometryError(TomographyError, ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


class InsufficientDataWarning(UserWarning):
    pass
