"""Exception taxonomy, mapped to distinct CLI exit codes in cli.py."""


class MfldivError(Exception):
    """Base class for package-raised failures."""


class ConfigError(MfldivError):
    """Invalid configuration values or files."""


class DataFormatError(MfldivError):
    """Malformed, truncated, or version-mismatched data files."""


class NumericalFailure(MfldivError):
    """Singular systems, non-finite states, and similar numerical breakdowns."""


class DivergenceError(NumericalFailure):
    """Particle system diverged (mean norm above the guard threshold)."""
