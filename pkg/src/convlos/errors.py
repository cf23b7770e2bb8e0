"""Exception hierarchy shared by every module of the package."""


class ConvlosError(Exception):
    """Base class for all errors raised by convlos."""


class ParameterDomainError(ConvlosError, ValueError):
    """A distribution parameter lies outside its legal domain."""


class DataDomainError(ConvlosError, ValueError):
    """An observation is outside the support the model requires."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class TruncationError(ConvlosError, RuntimeError):
    """Truncated summation hit its term cap before reaching the mass target."""

    def __init__(self, message, mass=None):
        super().__init__(message)
        self.mass = mass


class SchemaError(ConvlosError, ValueError):
    """A record does not conform to the declared feature schema."""

    def __init__(self, message, row=None, field=None):
        super().__init__(message)
        self.row = row
        self.field = field


class ShapeError(ConvlosError, ValueError):
    """Coefficient vector and design matrix do not line up."""


class DegenerateFitError(ConvlosError, ValueError):
    """The data cannot identify the requested family (e.g. zero variance)."""


class DegeneratePointError(ConvlosError, ValueError):
    """The mixture density vanishes at an observation."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ComponentStarvationError(ConvlosError, ValueError):
    """A mixture component received zero total responsibility."""


class InitError(ConvlosError, ValueError):
    """The starting point of a fit has a non-finite likelihood."""


class ModelValidityError(ConvlosError, ValueError):
    """A model CDF is not monotone on the evaluation points."""


class ConfigError(ConvlosError, ValueError):
    """A run or model configuration is incomplete or inconsistent."""


class ParseError(ConvlosError, ValueError):
    """A data file is malformed at a given row."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
