import logging
import sys
from collections.abc import Sequence

from app.cli.cli import build_parser
from app.core.config import common_settings
from app.core.exceptions import (
    BackendError,
    BaseError,
    ConfigError,
    DirectiveFailedError,
    EmptyInputError,
    InfeasibleError,
    MissingAnchorError,
    MissingLayoutError,
    ParseError,
    ProtocolError,
    ShapeMismatchError,
    TemplateMismatchError,
    UndecomposableError,
    UnknownRelationError,
)
from app.core.logger import init_logger

logger = logging.getLogger(__name__)

# first matching class wins, so subclasses come before their bases
EXIT_CODES: tuple[tuple[type[BaseError], int], ...] = (
    (ParseError, 2),
    (TemplateMismatchError, 2),
    (UndecomposableError, 2),
    (UnknownRelationError, 2),
    (ConfigError, 2),
    (MissingLayoutError, 2),
    (DirectiveFailedError, 3),
    (MissingAnchorError, 3),
    (InfeasibleError, 3),
    (BackendError, 4),
    (ProtocolError, 4),
    (ShapeMismatchError, 4),
    (EmptyInputError, 4),
)
DEFAULT_EXIT_CODE = 1
BACKEND_EXIT_CODE = 4


def exit_code(exc: BaseError) -> int:
    """
    Map an application error to a process exit code.

    2: malformed input or config, 3: a directive failed (partial artifacts are kept),
    4: backend, protocol or missing input failure, also when it aborted a directive.
    """
    cause = exc.__cause__
    if isinstance(exc, DirectiveFailedError) and isinstance(cause, BaseError) and exit_code(cause) == BACKEND_EXIT_CODE:
        return BACKEND_EXIT_CODE
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return DEFAULT_EXIT_CODE


def main(argv: Sequence[str] | None = None) -> int:
    """
    Entry point of the `srf` command.

    Args:
        argv (Sequence[str] | None): Arguments without the program name; `sys.argv` when None.

    Returns:
        int: Process exit code.
    """
    init_logger()
    args = build_parser().parse_args(argv)
    if common_settings.debug:
        logger.debug("Debug active")

    try:
        return int(args.handler(args))
    except BaseError as exc:
        if common_settings.debug:
            logger.exception("Command '%s' failed", args.command)
        sys.stderr.write(f"error: {exc}\n")
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
