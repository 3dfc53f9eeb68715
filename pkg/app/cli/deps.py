import argparse
import hashlib
from pathlib import Path

from app.core.config import RunConfig
from app.core.exceptions import BaseError, EmptyInputError, ParseError
from app.entity.directive import DirectiveScript
from app.entity.layout import LayoutReport
from app.service.artifacts import read_layout
from app.service.directive_parser import DirectiveParser

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
DEFAULT_SUITE = DATA_DIR / "suite.txt"


def get_config(args: argparse.Namespace) -> RunConfig:
    """Resolve the run config: defaults, `SRF_` environment, `--config` file, then command-line flags."""
    overrides = {"seed": args.seed, "denoiser_cmd": args.denoiser_cmd}
    if args.config:
        return RunConfig.from_file(Path(args.config), **overrides)
    return RunConfig.build(**{k: v for k, v in overrides.items() if v is not None})


def get_parser() -> DirectiveParser:
    """Parser over the bundled relation lexicon."""
    return DirectiveParser()


def get_script(args: argparse.Namespace, parser: DirectiveParser) -> DirectiveScript:
    """Directive script from `--script` (script file) or `--text` (description)."""
    if args.script:
        return parser.load_script(Path(args.script))
    return parser.decompose(args.text)


def get_anchors(args: argparse.Namespace) -> LayoutReport | None:
    """User anchor boxes from `--anchors`, if given."""
    return read_layout(Path(args.anchors)) if args.anchors else None


def read_suite(path: Path, parser: DirectiveParser) -> list[DirectiveScript]:
    """
    Read a suite file: one scene description per line, `#` comments.

    Raises:
        EmptyInputError: If the file is missing or holds no description.
        ParseError: If a description cannot be decomposed (carries the line number).
    """
    if not path.is_file():
        msg = f"Suite file {path} not found"
        raise EmptyInputError(msg)
    scripts = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            scripts.append(parser.decompose(line))
        except ParseError:
            raise
        except BaseError as exc:
            raise ParseError(str(exc), line_no=line_no) from exc
    if not scripts:
        msg = f"Suite file {path} holds no description"
        raise EmptyInputError(msg)
    return scripts


def run_id(config: RunConfig) -> str:
    """Identifier of a run: digest of the resolved config, which includes the seed."""
    return hashlib.sha256(config.dump().encode("utf-8")).hexdigest()[:32]


def add_input_arguments(parser: argparse.ArgumentParser) -> None:
    """Add the mutually exclusive `--script` / `--text` inputs."""
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--script", help="directive script file")
    group.add_argument("--text", help="scene description to decompose")
    parser.add_argument("--anchors", help="layout report file with known anchor boxes")


def common_arguments() -> argparse.ArgumentParser:
    """Parent parser with the flags every subcommand accepts."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="flat 'key = value' config file")
    parent.add_argument("--seed", type=int, help="seed of every pseudo-random draw")
    parent.add_argument("--out", help="output file or directory")
    parent.add_argument("--denoiser-cmd", dest="denoiser_cmd", help="command line of an external denoiser")
    parent.add_argument("--jobs", type=int, default=1, help="worker processes for suite runs")
    return parent
