import argparse
import sys
from pathlib import Path

from app.cli.deps import add_input_arguments, common_arguments, get_anchors, get_config, get_parser, get_script
from app.core.exceptions import EmptyInputError
from app.service.artifacts import format_layout
from app.service.directive_parser import DirectiveParser
from app.service.layout_engine import LayoutEngine


def cmd_decompose(args: argparse.Namespace) -> int:
    """
    Decompose a description into a directive script.

    The script goes to `--out` when given, standard output otherwise.
    """
    parser = get_parser()
    if args.file:
        path = Path(args.file)
        if not path.is_file():
            msg = f"Description file {path} not found"
            raise EmptyInputError(msg)
        text = path.read_text(encoding="utf-8")
    elif args.text:
        text = " ".join(args.text)
    else:
        raise EmptyInputError("Nothing to decompose, give a description or --file")
    script = parser.decompose(text)
    rendered = DirectiveParser.dump_script(script)
    if args.out:
        parser.save_script(script, Path(args.out))
    else:
        sys.stdout.write(rendered)
    return 0


def cmd_layout(args: argparse.Namespace) -> int:
    """
    Plan the layout of a script without running diffusion.

    One report per directive is written to `--out/NN.txt`; without `--out` the final report is printed.
    """
    config = get_config(args)
    script = get_script(args, get_parser())
    reports = LayoutEngine.from_config(config).plan(script.directives, get_anchors(args), config.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for index, report in enumerate(reports):
            (out / f"{index:02d}.txt").write_text(format_layout(report), encoding="utf-8")
    else:
        sys.stdout.write(format_layout(reports[-1]))
    return 0


def register(subparsers: "argparse._SubParsersAction[argparse.ArgumentParser]") -> None:
    """Register the `decompose` and `layout` subcommands."""
    decompose = subparsers.add_parser(
        "decompose", parents=[common_arguments()], help="split a description into directives"
    )
    decompose.add_argument("text", nargs="*", help="description text")
    decompose.add_argument("--file", help="file holding the description, instead of the text")
    decompose.set_defaults(handler=cmd_decompose)

    layout = subparsers.add_parser("layout", parents=[common_arguments()], help="solve the layout of a script")
    add_input_arguments(layout)
    layout.set_defaults(handler=cmd_layout)
