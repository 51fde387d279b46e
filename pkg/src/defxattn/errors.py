"""Exception hierarchy shared by every module of the package."""


class DefxattnError(Exception):
    """Base class; ``code`` is the short machine-readable name the CLI prints."""

    code = "Error"


class ShapeError(DefxattnError, ValueError):
    code = "ShapeError"


class AxisError(DefxattnError, IndexError):
    code = "AxisError"


class ConfigError(DefxattnError, ValueError):
    code = "ConfigError"


class GraphError(DefxattnError, RuntimeError):
    code = "GraphError"


class NonFiniteError(DefxattnError, FloatingPointError):
    code = "NonFiniteError"


class MetricError(DefxattnError, ValueError):
    code = "MetricError"


class GenerationError(DefxattnError, RuntimeError):
    code = "GenerationError"


class FormatError(DefxattnError, ValueError):
    code = "FormatError"
