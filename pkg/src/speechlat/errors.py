"""Error taxonomy shared across the toolkit.

Exit-code mapping used by the CLI: ConfigError -> 1 (usage),
DataError -> 2, NumericError -> 3.
"""


class SpeechlatError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(SpeechlatError):
    """Invalid configuration or usage."""

    exit_code = 1


class DataError(SpeechlatError):
    """Malformed, missing, or out-of-contract input data."""

    exit_code = 2


class NumericError(SpeechlatError):
    """Numerical failure: non-finite values, degenerate denominators."""

    exit_code = 3
