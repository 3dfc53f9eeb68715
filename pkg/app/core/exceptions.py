from typing import Any


class BaseError(Exception):
    """A base class for all custom exceptions in the application."""


class ConfigError(BaseError):
    """Exception raised when a run configuration is malformed or violates a constraint."""


class ParseError(BaseError):
    """
    Raised when a directive script file cannot be read.

    Attributes:
        line_no (int | None): One-based line number of the offending line, if known.
    """

    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class TemplateMismatchError(BaseError):
    """
    Raised when a clause matches none of the synthesis/editing/erasing templates.

    Attributes:
        clause_index (int | None): Zero-based index of the clause inside the decomposed text.
    """

    def __init__(self, message: str, clause_index: int | None = None) -> None:
        self.clause_index = clause_index
        if clause_index is not None:
            message = f"clause {clause_index}: {message}"
        super().__init__(message)


class EmptyEntityError(TemplateMismatchError):
    """Raised when a required template slot parses to an empty entity."""


class UndecomposableError(BaseError):
    """Raised when a text has no clause boundary and the whole text fails all templates."""


class UnknownRelationError(BaseError):
    """Raised when a relation lexeme is not part of the registered lexicon."""


class MissingAnchorError(BaseError):
    """Raised when a directive references an anchor entity without a known box."""


class InfeasibleError(BaseError):
    """Raised when the layout solver cannot find an assignment satisfying every constraint."""


class DegenerateAttentionError(BaseError):
    """Raised in strict mode when an attention map is constant and cannot be thresholded."""


class ShapeMismatchError(BaseError):
    """Raised when two grids or tensors that must agree in shape do not."""


class ProtocolError(BaseError):
    """
    Raised for malformed messages exchanged with an external denoiser process.

    Attributes:
        offset (int | None): Byte offset in the stream where framing broke, if known.
    """

    def __init__(self, message: str, offset: int | None = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class BackendError(BaseError):
    """Raised when an external denoiser reports a failure or cannot be started."""


class DenoiserTimeoutError(BackendError):
    """Raised when an external denoiser does not answer within the configured timeout."""


class NonFiniteGradientError(BaseError):
    """
    Raised when the latent response produces a non-finite gradient or latent.

    Attributes:
        step (int): Ascending reverse-step count at which the failure occurred.
        diagnostics (dict[str, Any]): Loss and norms recorded at the failing step.
    """

    def __init__(self, step: int, diagnostics: dict[str, Any]) -> None:
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"non-finite gradient at step {step}: {diagnostics}")


class DirectiveFailedError(BaseError):
    """
    Raised by the progressive driver when a directive aborts.

    Attributes:
        stage_index (int): Zero-based index of the failing directive.
        partial (Any): The results of the stages completed before the failure.
    """

    def __init__(self, stage_index: int, partial: Any, cause: BaseException) -> None:  # noqa: ANN401
        self.stage_index = stage_index
        self.partial = partial
        super().__init__(f"directive {stage_index} failed: {cause}")


class MissingLayoutError(BaseError):
    """Raised when a directive has no solved box, mask or reference attention to run against."""


class EmptyInputError(BaseError):
    """Raised when an evaluation is requested over nothing."""
