"""Exception hierarchy shared by all modules."""


class LocalBatchError(Exception):
    """Base class for every error raised by this package."""


class InputError(LocalBatchError, ValueError):
    """An operation received arguments outside its domain."""


class ConfigError(LocalBatchError, ValueError):
    """A configuration is invalid.

    ``errors`` holds every problem found, not just the first one. Each entry is
    a ``(key_path, line, message)`` triple; ``line`` is ``None`` when the error
    did not originate from a file.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [("", None, errors)]
        self.errors = list(errors)
        super().__init__("; ".join(_format(e) for e in self.errors))


def _format(err):
    key, line, msg = err
    where = key or "<config>"
    if line is not None:
        where += f" (line {line})"
    return f"{where}: {msg}"


class NumericalError(LocalBatchError, ArithmeticError):
    """Non-finite values or divergence during a run."""


class InsufficientDataError(LocalBatchError):
    """Too few usable points to fit a rate model."""


class FeatureError(LocalBatchError):
    """A feature was requested that the run did not record."""


class ComparisonError(LocalBatchError):
    """Runs being compared are not comparable (e.g. different budgets)."""


class SchemaError(LocalBatchError):
    """A metrics file does not follow the expected schema."""
