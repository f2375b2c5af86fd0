"""Exception hierarchy shared by every shadowsplat module.

Each error carries the process exit code the CLI reports for it, so
command handlers can simply raise and let ``main`` translate.
"""

from typing import Optional


class ShadowSplatError(Exception):
    """Base class for all shadowsplat failures."""

    exit_code = 1


class InvalidParameterError(ShadowSplatError, ValueError):
    """A value or tensor shape passed to an operation is not acceptable."""

    exit_code = 2


class InvalidInputError(ShadowSplatError, ValueError):
    """A file, dataset or radiance input is missing or malformed."""

    exit_code = 2


class NumericalFailureError(ShadowSplatError, RuntimeError):
    """Optimization diverged or a gradient check fell below its pass bar."""

    exit_code = 3

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class PriorProviderError(ShadowSplatError, RuntimeError):
    """A prior provider or inpaint oracle failed on a view."""

    exit_code = 3

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint
