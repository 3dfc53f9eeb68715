import argparse
import json
import logging
import sys
from pathlib import Path

from asgi_correlation_id import correlation_id

from app.cli.deps import add_input_arguments, common_arguments, get_anchors, get_config, get_parser, get_script, run_id
from app.core.exceptions import DirectiveFailedError
from app.diffusion.factory import open_denoiser
from app.entity.directive import TokenVocabulary
from app.service.artifacts import read_latent
from app.service.evaluation import Evaluator, background_latent
from app.service.run_store import load_run, rebuild_result, save_run
from app.service.srf_engine import SRFEngine

logger = logging.getLogger(__name__)


def cmd_run(args: argparse.Namespace) -> int:
    """
    Run a directive script and write the run directory.

    On a failing directive the completed stages are still written before the error propagates.
    """
    config = get_config(args)
    rid = run_id(config)
    correlation_id.set(rid)
    parser = get_parser()
    script = get_script(args, parser)
    anchors = get_anchors(args)
    out = Path(args.out) if args.out else Path("runs") / rid

    if args.background:
        background = read_latent(Path(args.background))
    else:
        background = background_latent(config, config.seed)

    vocab = TokenVocabulary.from_script(script)
    logger.info("Run %s: %d directives, tokens %s", rid, len(script), vocab.ids)
    with open_denoiser(config) as denoiser:
        engine = SRFEngine.from_config(config, denoiser)
        try:
            result = engine.run_progressive(background, script, anchors, config.seed, vocab)
        except DirectiveFailedError as exc:
            save_run(out, config, script, exc.partial, vocab)
            raise
    save_run(out, config, script, result, vocab)
    sys.stdout.write(f"{out}\n")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a run directory and print the metric report as JSON."""
    stored = load_run(Path(args.run_dir), get_parser())
    config = stored.config
    if args.denoiser_cmd:
        config = config.model_copy(update={"denoiser_cmd": args.denoiser_cmd})
    correlation_id.set(run_id(config))

    vocab = TokenVocabulary.from_script(stored.script)
    with open_denoiser(config) as denoiser:
        result = rebuild_result(stored, denoiser, vocab)
    report = Evaluator(config).evaluate(result, stored.script, vocab)

    rendered = json.dumps(report.as_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
    else:
        sys.stdout.write(rendered)
    return 0


def register(subparsers: "argparse._SubParsersAction[argparse.ArgumentParser]") -> None:
    """Register the `run` and `eval` subcommands."""
    run = subparsers.add_parser("run", parents=[common_arguments()], help="run a directive script")
    add_input_arguments(run)
    run.add_argument("--background", help="background latent file; a seeded random latent when omitted")
    run.set_defaults(handler=cmd_run)

    evaluate = subparsers.add_parser("eval", parents=[common_arguments()], help="evaluate a run directory")
    evaluate.add_argument("run_dir", help="directory written by 'run'")
    evaluate.set_defaults(handler=cmd_eval)
