"""Exception types shared across the package."""


class RagiuError(Exception):
    pass


class ShapeError(RagiuError, ValueError):
    pass


class EmptyInputError(RagiuError, ValueError):
    pass


class EmptyKeyError(RagiuError, ValueError):
    pass


class ParameterError(RagiuError, ValueError):
    pass


class ConfigError(RagiuError, ValueError):
    pass


class IndexStaleError(RagiuError, RuntimeError):
    pass


class EmptyIndexError(RagiuError, ValueError):
    pass


class GradientSetError(RagiuError, ValueError):
    pass


class ProbeError(RagiuError, FloatingPointError):
    pass


class NumericAbort(RagiuError, FloatingPointError):
    """Raised when a training loss turns non-finite; carries a diagnostic dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FormatError(RagiuError, ValueError):
    pass


class CorpusError(RagiuError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
