import logging
from dataclasses import dataclass
from pathlib import Path

from app.core.config import RunConfig
from app.core.exceptions import ParseError
from app.entity.directive import DirectiveScript, TokenVocabulary
from app.entity.latent import LatentGrid
from app.entity.layout import LayoutReport
from app.entity.trace import ProgressiveResult, RunTrace, StageResult
from app.interface.denoiser import BaseDenoiser
from app.service.artifacts import (
    format_layout,
    read_latent,
    read_layout,
    write_latent,
    write_manifest,
    write_mask_pgm,
    write_pgm,
    write_trace,
)
from app.service.directive_parser import DirectiveParser
from app.service.layout_engine import rasterize_mask
from app.service.srf_engine import READOUT_T

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
SCRIPT_FILE = "script.txt"
BACKGROUND_FILE = "background.latent"


@dataclass
class StoredRun:
    """A run directory read back from disk."""

    config: RunConfig
    script: DirectiveScript
    background: LatentGrid
    latents: list[LatentGrid]
    layouts: list[LayoutReport]


def save_run(
    directory: Path,
    config: RunConfig,
    script: DirectiveScript,
    result: ProgressiveResult,
    vocab: TokenVocabulary,
) -> Path:
    """
    Write every artifact of a (possibly partial) run and its manifest.

    Layout: `config.txt`, `script.txt`, `background.latent`, `stages/NN.latent`, `traces/NN.json`,
    `heatmaps/NN_token_K.pgm`, `layout/NN.txt`, `layout/NN_<entity>.pgm` (0/255 masks) and `manifest.txt`.

    Returns:
        Path: The manifest path.
    """
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CONFIG_FILE).write_text(config.dump(), encoding="utf-8")
    (directory / SCRIPT_FILE).write_text(DirectiveParser.dump_script(script), encoding="utf-8")
    write_latent(result.background, directory / BACKGROUND_FILE)

    for index, stage in enumerate(result.stages):
        nn = f"{index:02d}"
        write_latent(stage.latent, directory / "stages" / f"{nn}.latent")
        write_trace(
            stage.trace,
            directory / "traces" / f"{nn}.json",
            {"stage": index, "directive": DirectiveParser.render(stage.directive)},
        )
        (directory / "layout").mkdir(exist_ok=True)
        (directory / "layout" / f"{nn}.txt").write_text(format_layout(stage.layout), encoding="utf-8")
        for name, mask in stage.masks.items():
            write_mask_pgm(mask, directory / "layout" / f"{nn}_{name.replace(' ', '_')}.pgm")
        if stage.trace.final_attention is not None:
            for token in stage.trace.tokens:
                write_pgm(
                    stage.trace.final_attention.probabilities(token),
                    directory / "heatmaps" / f"{nn}_token_{token}.pgm",
                )

    manifest = write_manifest(directory)
    logger.info("Run written to %s (%d stages, %s)", directory, len(result.stages), vocab.ids)
    return manifest


def load_run(directory: Path, parser: DirectiveParser) -> StoredRun:
    """
    Read a run directory written by `save_run`.

    Raises:
        ParseError: If the directory holds no run.
    """
    if not (directory / SCRIPT_FILE).is_file() or not (directory / CONFIG_FILE).is_file():
        msg = f"'{directory}' is not a run directory"
        raise ParseError(msg)
    config = RunConfig.from_file(directory / CONFIG_FILE)
    script = parser.load_script(directory / SCRIPT_FILE)
    latents = [read_latent(p) for p in sorted((directory / "stages").glob("*.latent"))]
    layouts = [read_layout(p) for p in sorted((directory / "layout").glob("*.txt"))]
    if not latents or len(latents) != len(layouts):
        msg = f"'{directory}' has {len(latents)} stage latents and {len(layouts)} layout reports"
        raise ParseError(msg)
    return StoredRun(config, script, read_latent(directory / BACKGROUND_FILE), latents, layouts)


def rebuild_result(stored: StoredRun, denoiser: BaseDenoiser, vocab: TokenVocabulary) -> ProgressiveResult:
    """
    Rebuild a progressive result from stored artifacts by probing attention on the stage latents.

    Masks are rasterized from the stored boxes, so edited entities are measured on their box rather than on
    the attention mask the run used.
    """
    h, w = denoiser.attention_shape
    tokens = sorted(vocab.ids.values())
    result = ProgressiveResult(background=stored.background)
    for directive, latent, layout in zip(stored.script.directives, stored.latents, stored.layouts, strict=False):
        stage_tokens = [vocab[name] for name in layout.boxes if name in vocab.ids]
        trace = RunTrace(mode=directive.mode, tokens=stage_tokens)
        trace.final_attention = denoiser.denoise(latent, READOUT_T, stage_tokens).attention
        masks = {name: rasterize_mask(box, h, w) for name, box in layout.boxes.items()}
        result.stages.append(StageResult(directive, latent, trace, layout, masks))
    if len(stored.latents) < len(stored.script):
        result.failure = f"run stopped after {len(stored.latents)} of {len(stored.script)} directives"
    result.scene_attention = denoiser.denoise(result.final, READOUT_T, tokens).attention
    return result
