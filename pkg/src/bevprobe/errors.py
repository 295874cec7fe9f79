"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError exits with 2,
DataError with 3. Everything else is a plain bug and propagates.
"""


class BevProbeError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(BevProbeError):
    """Invalid configuration: bad flag combinations, malformed config files."""


class DataError(BevProbeError):
    """Invalid input data: corrupt files, inconsistent dumps, infeasible scenes."""
