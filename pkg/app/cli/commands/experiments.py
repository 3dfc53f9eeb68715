import argparse
import json
import logging
import sys
from pathlib import Path

from asgi_correlation_id import correlation_id

from app.cli.deps import DEFAULT_SUITE, common_arguments, get_config, get_parser, read_suite, run_id
from app.core.exceptions import ParseError
from app.diffusion.factory import open_denoiser
from app.entity.latent import LatentGrid
from app.entity.layout import BBox
from app.service.evaluation import VARIANTS, SuiteCase, SuiteRunner, build_suite, write_curve
from app.service.gradcheck import DEFAULT_STEP, check_latent_gradient
from app.service.layout_engine import rasterize_mask

logger = logging.getLogger(__name__)

GRADCHECK_BOX = BBox(0.25, 0.25, 0.55, 0.55)


def _suite(args: argparse.Namespace, seed: int) -> list[SuiteCase]:
    scripts = read_suite(Path(args.suite), get_parser())
    return build_suite(scripts, range(seed, seed + args.seeds))


def cmd_ablate(args: argparse.Namespace) -> int:
    """Run the suite under every ablation variant and print the metric table."""
    config = get_config(args)
    correlation_id.set(run_id(config))
    table = SuiteRunner(config, args.jobs).ablation_run(_suite(args, config.seed), args.variants)

    for name, summary in table.items():
        accuracy = "n/a" if summary.relation_accuracy is None else f"{summary.relation_accuracy:.4f}"
        sys.stdout.write(
            f"{name:<10} recall={summary.object_recall:.4f} accuracy={accuracy} "
            f"degraded={summary.degradation_rate:.4f}\n"
        )
    if args.out:
        payload = {name: summary.as_dict() for name, summary in table.items()}
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _values(raw: str) -> list[float]:
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        msg = f"Invalid sweep values '{raw}'"
        raise ParseError(msg) from exc
    if not values or values != sorted(values):
        msg = f"Sweep values must be a non-empty ascending list, got '{raw}'"
        raise ParseError(msg)
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run the suite per value of `alpha` or `tau` and emit the metric curve as CSV."""
    config = get_config(args)
    correlation_id.set(run_id(config))
    curve = SuiteRunner(config, args.jobs).sweep(args.parameter, _values(args.values), _suite(args, config.seed))
    for value, summary in curve:
        logger.info("%s=%s degradation rate %.4f", args.parameter, value, summary.degradation_rate)

    if args.out:
        with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
            write_curve(curve, fh)
    else:
        write_curve(curve, sys.stdout)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Compare the latent gradient of the stimulus loss with finite differences; exit 1 above tolerance."""
    config = get_config(args)
    z = LatentGrid.random((config.channels, config.height, config.width), config.seed, step_index=config.steps)
    mask = rasterize_mask(GRADCHECK_BOX, config.height, config.width)
    with open_denoiser(config) as denoiser:
        report = check_latent_gradient(
            z, denoiser, {0: mask}, config.delta, config.steps, args.directions, config.seed, h=args.step
        )
    sys.stdout.write(f"directions={report.directions} max_rel_error={report.max_rel_error:.3e}\n")
    return 0 if report.passed(args.tolerance) else 1


def register(subparsers: "argparse._SubParsersAction[argparse.ArgumentParser]") -> None:
    """Register the `ablate`, `sweep` and `gradcheck` subcommands."""
    for name, handler, text in (
        ("ablate", cmd_ablate, "compare ablation variants on a suite"),
        ("sweep", cmd_sweep, "sweep alpha or tau on a suite"),
    ):
        sub = subparsers.add_parser(name, parents=[common_arguments()], help=text)
        sub.add_argument("--suite", default=str(DEFAULT_SUITE), help="suite file, one description per line")
        sub.add_argument("--seeds", type=int, default=5, help="seeds per description")
        sub.set_defaults(handler=handler)
        if name == "ablate":
            sub.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
        else:
            sub.add_argument("parameter", choices=("alpha", "tau"))
            sub.add_argument("--values", required=True, help="comma separated, sorted values")

    gradcheck = subparsers.add_parser("gradcheck", parents=[common_arguments()], help="finite-difference check")
    gradcheck.add_argument("--directions", type=int, default=20)
    gradcheck.add_argument("--step", type=float, default=DEFAULT_STEP, help="central-difference step")
    gradcheck.add_argument("--tolerance", type=float, default=1e-5)
    gradcheck.set_defaults(handler=cmd_gradcheck)
