class OmniFuseError(Exception):
    """Base class for package errors."""


class FormatError(OmniFuseError, ValueError):
    """A file is missing a field or has one we cannot parse."""


class IntegrityError(OmniFuseError, ValueError):
    """File contents disagree with their header."""


class ShapeError(OmniFuseError, ValueError):
    pass


class ParameterError(OmniFuseError, ValueError):
    pass


class InsufficientDataError(OmniFuseError, ValueError):
    pass


class DivergenceError(OmniFuseError, RuntimeError):
    pass
