import argparse

from .commands import directives, experiments, run


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with every subcommand registered."""
    parser = argparse.ArgumentParser(
        prog="srf",
        description="Progressive text-to-latent synthesis, editing and erasing with stimulus, response and fusion.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    directives.register(subparsers)
    run.register(subparsers)
    experiments.register(subparsers)
    return parser
