"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its admissible domain."""


class RangeError(ValueError):
    """A requested time or shift falls outside the sampled window."""


class DataError(ValueError):
    """Stored data is missing, malformed or inconsistent."""


class BlowupError(RuntimeError):
    """The integrator produced non-finite values or the step size collapsed.

    ``diagnostics`` carries the last finite norms seen before the failure.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
