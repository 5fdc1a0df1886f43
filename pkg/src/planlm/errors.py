"""Exceptions shared across the pipeline; the CLI maps them to exit codes."""


class ValidationError(ValueError):
    """Bad input, configuration, or precondition (exit code 1)."""


class MissingArtifactError(FileNotFoundError):
    """An upstream pipeline artifact is absent (exit code 2)."""
