"""Shared exception types."""


class ConfigError(Exception):
    """Invalid configuration, campaign setup, or file contents (CLI exit 2)."""


class ShapeError(ValueError):
    """Layer geometry violation: shape mismatch, unsupported kernel or stride."""


class BitPositionError(ValueError):
    """Bit index outside the declared bit width."""
