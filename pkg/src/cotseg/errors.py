"""Exception types shared across the package."""


class CotSegError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CotSegError, ValueError):
    pass


class ShapeError(CotSegError, ValueError):
    pass


class ConfigurationError(CotSegError, ValueError):
    pass


class TemplateRenderError(CotSegError, ValueError):
    """A prompt template still contains unfilled placeholders."""


class ParseError(CotSegError, ValueError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class BackendError(CotSegError):
    """Transport-level failure talking to a language model backend (retryable)."""

    retryable = True


class ScriptMissError(CotSegError, KeyError):
    def __init__(self, digest: str, nearest: str | None):
        self.digest = digest
        self.nearest = nearest
        super().__init__(f"no scripted response for {digest}; nearest scripted key: {nearest}")

    def __str__(self) -> str:
        return self.args[0]


class InvalidSpanError(CotSegError, IndexError):
    pass


class ChainError(CotSegError):
    """A prompting chain stopped before completing.

    ``step`` is the 1-based step that failed and ``trace`` holds whatever was
    produced up to that point.
    """

    def __init__(self, message: str, step: int, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace


class CodecError(CotSegError, ValueError):
    pass


class DivergenceError(CotSegError, FloatingPointError):
    def __init__(self, message: str, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class FreezePolicyError(CotSegError):
    pass


class CheckpointError(CotSegError):
    pass
