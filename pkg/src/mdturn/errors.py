"""Error types shared across the package.

The CLI maps these onto exit statuses: configuration errors exit 1,
data errors exit 2, anything else exits 3.
"""


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class DataError(Exception):
    """Malformed or contract-violating market data."""


class SchemaError(DataError):
    """Input file is missing required columns or has an unusable header."""


class FitError(RuntimeError):
    """A model fit could not be performed (too few samples, degenerate data)."""


class InfeasibleError(RuntimeError):
    """A constraint system admits no feasible point; message names the violated aggregate."""
