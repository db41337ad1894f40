"""Exception types raised by maskwarp."""


class DimensionError(ValueError):
    """Array shapes or channel counts do not agree."""


class DomainError(ValueError):
    """Input values lie outside the domain an operation accepts."""


class DegenerateInputError(ValueError):
    """Input is well-formed but carries no usable information (e.g. empty valid set)."""


class RankDeficiencyError(DegenerateInputError):
    """A least-squares alignment has no unique solution."""


class SceneError(ValueError):
    """A synthetic scene cannot be rendered."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite."""


class ConfigError(ValueError):
    """A run configuration is invalid."""
