"""Exception hierarchy shared by every gicon module."""


class GiconError(Exception):
    """Base class for all errors raised by gicon."""


class ConfigError(GiconError):
    """Invalid or inconsistent configuration."""


class DataError(GiconError):
    """Malformed or inconsistent input data."""


class UnknownCategoryError(DataError, LookupError):
    """A category name is missing from the vocabulary."""


class StructuralError(DataError):
    """A scene graph references nodes that do not exist, or is otherwise malformed."""


class FormatError(DataError):
    """A document does not follow the expected file schema."""


class EmptyGraphError(DataError):
    """A scene graph has no nodes."""


class DimensionError(GiconError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class NumericError(GiconError, ArithmeticError):
    """A non-finite value or an undefined numeric operation was encountered."""
