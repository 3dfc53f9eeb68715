import csv
import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, TextIO

import numpy as np

from app.core.config import RunConfig
from app.core.exceptions import DirectiveFailedError, EmptyInputError, MissingLayoutError, NonFiniteGradientError
from app.diffusion.factory import open_denoiser
from app.entity.directive import (
    Directive,
    DirectiveScript,
    EditingDirective,
    ErasingDirective,
    SynthesisDirective,
    TokenVocabulary,
)
from app.entity.latent import AttentionStack, LatentGrid
from app.entity.layout import BBox, Containment, LayoutMask, LayoutReport, NoOverlap, Overlap, Proximity
from app.entity.trace import DirectiveRecord, MetricReport, ProgressiveResult, attention_mass
from app.service.layout_engine import LayoutEngine, mass_center
from app.service.srf_engine import READOUT_T, SRFEngine

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_fusion", "no_sr")
SWEEP_PARAMETERS = ("alpha", "tau")
# seed stream of background latents, kept apart from the per-stage streams
BACKGROUND_STREAM = 9999


def background_latent(config: RunConfig, seed: int) -> LatentGrid:
    """Standard normal background of a suite case."""
    return LatentGrid.random((config.channels, config.height, config.width), [seed, BACKGROUND_STREAM])


def expected_entities(script: DirectiveScript) -> list[str]:
    """Entities present after every directive of the script ran, in order of appearance."""
    present: list[str] = []
    for directive in script.directives:
        match directive:
            case SynthesisDirective():
                present.extend(e.name for e in directive.inserted if e.name not in present)
            case EditingDirective(source=source, target=target):
                present = [target.name if n == source.name else n for n in present]
            case ErasingDirective(target=target):
                present = [n for n in present if n != target.name]
    return present


@dataclass
class SuiteCase:
    """One script of a suite paired with one seed."""

    script_index: int
    script: DirectiveScript
    seed: int


@dataclass
class CaseOutcome:
    """Metrics of one suite case."""

    script_index: int
    seed: int
    report: MetricReport
    failure: str | None = None


@dataclass
class SuiteSummary:
    """
    Metrics of a suite run, aggregated over cases.

    Attributes:
        label (str): Variant name or swept value.
        object_recall (float): Mean object recall over cases.
        relation_accuracy (float | None): Satisfied over total relation descriptions; None when there are none.
        degradation_rate (float): Fraction of degraded cases.
        outcomes (list[CaseOutcome]): Per-case metrics.
    """

    label: str
    object_recall: float
    relation_accuracy: float | None
    degradation_rate: float
    outcomes: list[CaseOutcome] = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """(script index, seed) of every case, in order."""
        return [(o.script_index, o.seed) for o in self.outcomes]

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready view."""
        return {
            "label": self.label,
            "object_recall": self.object_recall,
            "relation_accuracy": self.relation_accuracy,
            "degradation_rate": self.degradation_rate,
            "cases": [
                {"script": o.script_index, "seed": o.seed, "failure": o.failure} | o.report.as_dict()
                for o in self.outcomes
            ],
        }


class Evaluator:
    """Attention-mass and geometric proxies of object recall and relation accuracy."""

    def __init__(self, config: RunConfig, layout_engine: LayoutEngine | None = None) -> None:
        """
        Initialize Evaluator.

        Args:
            config (RunConfig): Thresholds and geometry parameters.
            layout_engine (LayoutEngine | None): Engine whose relation geometry is evaluated.
        """
        self.config = config
        self.layout_engine = layout_engine or LayoutEngine.from_config(config)

    @staticmethod
    def object_recall(
        attention: AttentionStack,
        masks: dict[str, LayoutMask],
        vocab: TokenVocabulary,
        threshold: float = 0.5,
        expected: Sequence[str] | None = None,
    ) -> float:
        """
        Fraction of objects whose softmaxed attention holds at least `threshold` of its mass inside their mask.

        Args:
            attention (AttentionStack): Attention read off the final latent.
            masks (dict[str, LayoutMask]): Mask of every present object.
            vocab (TokenVocabulary): Token ids of entity names.
            threshold (float): Mass an object needs to count as synthesized.
            expected (Sequence[str] | None): Objects that should be present; defaults to the masked ones.
                Expected objects without a mask count as missing.

        Raises:
            EmptyInputError: If there is no object to evaluate.

        Returns:
            float: Recall in [0, 1].
        """
        names = list(expected) if expected is not None else list(masks)
        if not names:
            raise EmptyInputError("No objects to evaluate")
        found = 0
        for name in names:
            token = vocab.ids.get(name)
            if name in masks and token is not None and token in attention:
                found += attention_mass(attention.probabilities(token), masks[name]) >= threshold
        return found / len(names)

    def _split_constraints(
        self,
        directive: SynthesisDirective,
        boxes: dict[str, BBox],
    ) -> tuple[list[Any], list[Any], list[BBox]]:
        names = [e.name for e in directive.inserted]
        if any(n not in boxes for n in names):
            msg = f"Layout has no box for {[n for n in names if n not in boxes]}"
            raise MissingLayoutError(msg)
        anchors = {k: v for k, v in boxes.items() if k not in names}
        cset = self.layout_engine.relation_to_constraints(directive, anchors)
        position, relation = [], []
        for constraint in cset.constraints:
            if isinstance(constraint, Containment):
                continue
            pairwise = isinstance(constraint, NoOverlap) or (
                isinstance(constraint, (Proximity, Overlap)) and isinstance(constraint.other, int)
            )
            (relation if pairwise else position).append(constraint)
        return position, relation, [boxes[n] for n in names]

    def relation_counts(self, directive: Directive, boxes: dict[str, BBox]) -> tuple[int, int]:
        """(total, satisfied) relation descriptions of one directive on concrete boxes."""
        if not isinstance(directive, SynthesisDirective) or (directive.relation is None and directive.position is None):
            return 0, 0
        position, relation, placed = self._split_constraints(directive, boxes)
        total = satisfied = 0
        for group, present in ((position, directive.position), (relation, directive.relation)):
            if present is None:
                continue
            total += 1
            satisfied += all(c.is_satisfied(placed) for c in group)
        return total, satisfied

    def relation_accuracy(self, layouts: Sequence[LayoutReport], directives: Sequence[Directive]) -> float | None:
        """
        Fraction of relation descriptions whose geometric predicates hold.

        Each synthesis directive is evaluated on the layout report of its own stage.

        Raises:
            MissingLayoutError: If a synthesis directive has no boxes in its report.

        Returns:
            float | None: Accuracy, or None when no directive describes a relation.
        """
        if len(layouts) != len(directives):
            raise MissingLayoutError("One layout report per directive is required")
        total = satisfied = 0
        for layout, directive in zip(layouts, directives, strict=True):
            t, s = self.relation_counts(directive, layout.boxes)
            total += t
            satisfied += s
        return None if total == 0 else satisfied / total

    @staticmethod
    def observed_layouts(result: ProgressiveResult, vocab: TokenVocabulary) -> list[LayoutReport]:
        """
        Layout reports with every synthesized box moved to where its attention actually sits.

        A planned box is translated so its centre matches the centre of mass of the entity's softmaxed
        attention: the scene attention when the entity is still present at the end, the attention of its own
        stage otherwise. Boxes never synthesized (anchors) stay where they are.
        """
        synthesized = {
            e.name
            for stage in result.stages
            if isinstance(stage.directive, SynthesisDirective)
            for e in stage.directive.inserted
        }
        final_names = set(result.layout.boxes)
        observed = []
        for stage in result.stages:
            report = stage.layout.copy()
            for name, box in stage.layout.boxes.items():
                token = vocab.ids.get(name)
                if name not in synthesized or token is None:
                    continue
                attention = result.scene_attention if name in final_names else stage.trace.final_attention
                if attention is None or token not in attention:
                    continue
                report.boxes[name] = _translate(box, mass_center(attention.probabilities(token)))
            observed.append(report)
        return observed

    def evaluate(self, result: ProgressiveResult, script: DirectiveScript, vocab: TokenVocabulary) -> MetricReport:
        """
        Metrics of a (possibly partial) progressive run.

        Recall is measured against every object the whole script should leave in the scene; relation accuracy
        covers the completed stages. A run is degraded when it failed or its latent grew beyond
        `distortion_ratio` times the background's magnitude.
        """
        attention = result.scene_attention
        if attention is None:
            attention = self._scene_attention(result, vocab)
        recall = self.object_recall(
            attention, result.masks, vocab, self.config.recall_threshold, expected_entities(script)
        )

        layouts = self.observed_layouts(result, vocab)
        completed = [stage.directive for stage in result.stages]
        accuracy = self.relation_accuracy(layouts, completed) if completed else None

        records = []
        for index, directive in enumerate(script.directives):
            if index >= len(result.stages):
                records.append(DirectiveRecord(index, directive.mode, [], {}, 0, 0))
                continue
            stage = result.stages[index]
            final = stage.trace.final_attention
            mass = {}
            if final is not None:
                mass = {
                    vocab.name_of(k): attention_mass(final.probabilities(k), m) for k, m in stage.trace.masks.items()
                }
            total, satisfied = self.relation_counts(directive, layouts[index].boxes)
            records.append(DirectiveRecord(index, directive.mode, list(mass), mass, total, satisfied))

        bg_scale = float(np.max(np.abs(result.background.data)))
        distorted = float(np.max(np.abs(result.final.data))) > self.config.distortion_ratio * bg_scale
        return MetricReport(recall, accuracy, records, degraded=result.failure is not None or distorted)

    @staticmethod
    def locality_violations(result: ProgressiveResult) -> list[int]:
        """
        Stages that changed the latent outside their fusion region.

        The region is the last fusion mask of the stage, or the union of its stimulus masks when fusion was
        off. Outside it the stage output must equal its input bitwise.
        """
        violations = []
        previous = result.background
        for index, stage in enumerate(result.stages):
            region = stage.trace.fusion_mask
            if region is None:
                region = LayoutMask(
                    np.logical_or.reduce([m.grid for m in stage.trace.masks.values()]),
                    next(iter(stage.trace.masks.values())).source,
                )
            outside = ~region.grid
            if not np.array_equal(stage.latent.data[:, outside], previous.data[:, outside]):
                violations.append(index)
            previous = stage.latent
        return violations

    def _scene_attention(self, result: ProgressiveResult, vocab: TokenVocabulary) -> AttentionStack:
        with open_denoiser(self.config) as denoiser:
            return denoiser.denoise(result.final, READOUT_T, sorted(vocab.ids.values())).attention


def run_case(config_values: dict[str, Any], overrides: dict[str, Any], case: SuiteCase) -> CaseOutcome:
    """
    Run and evaluate one suite case. Module-level so worker processes can execute it.

    A failed directive yields a degraded outcome built from the partial result; non-finite gradients are
    logged as such.
    """
    config = RunConfig.build(**config_values)
    vocab = TokenVocabulary.from_script(case.script)
    evaluator = Evaluator(config)
    with open_denoiser(config) as denoiser:
        engine = SRFEngine.from_config(config, denoiser, **overrides)
        failure = None
        try:
            background = background_latent(config, case.seed)
            result = engine.run_progressive(background, case.script, seed=case.seed, vocab=vocab)
        except DirectiveFailedError as exc:
            result = exc.partial
            failure = str(exc)
            if isinstance(exc.__cause__, NonFiniteGradientError):
                logger.warning("Case %d/%d diverged: %s", case.script_index, case.seed, exc.__cause__)
            result.scene_attention = denoiser.denoise(result.final, READOUT_T, sorted(vocab.ids.values())).attention
    report = evaluator.evaluate(result, case.script, vocab)
    return CaseOutcome(case.script_index, case.seed, report, failure)


def summarize(label: str, outcomes: list[CaseOutcome]) -> SuiteSummary:
    """Aggregate case outcomes."""
    if not outcomes:
        raise EmptyInputError("No suite cases to summarize")
    recall = float(np.mean([o.report.object_recall for o in outcomes]))
    total = sum(r.relations_total for o in outcomes for r in o.report.records)
    satisfied = sum(r.relations_satisfied for o in outcomes for r in o.report.records)
    degraded = sum(o.report.degraded for o in outcomes) / len(outcomes)
    return SuiteSummary(label, recall, None if total == 0 else satisfied / total, degraded, outcomes)


def build_suite(scripts: Sequence[DirectiveScript], seeds: Iterable[int]) -> list[SuiteCase]:
    """Pair every script with every seed."""
    seed_list = list(seeds)
    return [SuiteCase(i, script, seed) for i, script in enumerate(scripts) for seed in seed_list]


class SuiteRunner:
    """Runs suites under config variants, optionally across worker processes."""

    def __init__(self, config: RunConfig, jobs: int = 1) -> None:
        """
        Initialize SuiteRunner.

        Args:
            config (RunConfig): Base config of every run.
            jobs (int): Worker processes; 1 runs in-process.
        """
        if jobs < 1:
            raise ValueError("jobs must be positive")
        self.config = config
        self.jobs = jobs

    def run(self, label: str, suite: list[SuiteCase], overrides: dict[str, Any] | None = None) -> SuiteSummary:
        """Run every case of a suite under config overrides."""
        if not suite:
            raise EmptyInputError("Suite is empty")
        overrides = overrides or {}
        values = self.config.model_dump()
        logger.info("Running %d cases for %s", len(suite), label)
        if self.jobs == 1:
            outcomes = [run_case(values, overrides, case) for case in suite]
        else:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                outcomes = list(pool.map(run_case, [values] * len(suite), [overrides] * len(suite), suite))
        return summarize(label, outcomes)

    def ablation_run(self, suite: list[SuiteCase], variants: Sequence[str] = VARIANTS) -> dict[str, SuiteSummary]:
        """
        Run the suite once per variant.

        `no_fusion` disables latent fusion; `no_sr` sets the response step size to zero.

        Raises:
            ValueError: On an unknown variant or if variants did not run on identical (script, seed) pairs.
        """
        table = {}
        for variant in variants:
            match variant:
                case "full":
                    overrides: dict[str, Any] = {}
                case "no_fusion":
                    overrides = {"fusion": False}
                case "no_sr":
                    overrides = {"alpha": 0.0}
                case _:
                    msg = f"Unknown variant '{variant}'"
                    raise ValueError(msg)
            table[variant] = self.run(variant, suite, overrides)

        pairs = {tuple(summary.pairs) for summary in table.values()}
        if len(pairs) > 1:
            raise ValueError("Variants ran on different seed lists")
        return table

    def sweep(
        self,
        parameter: str,
        values: Sequence[float],
        suite: list[SuiteCase],
    ) -> list[tuple[float, SuiteSummary]]:
        """
        Run the suite once per value of `alpha` or `tau`.

        Raises:
            ValueError: On an unknown parameter or unsorted values.
        """
        if parameter not in SWEEP_PARAMETERS:
            msg = f"Cannot sweep '{parameter}', expected one of {SWEEP_PARAMETERS}"
            raise ValueError(msg)
        if list(values) != sorted(values):
            raise ValueError("Sweep values must be sorted")
        return [(value, self.run(f"{parameter}={value}", suite, {parameter: value})) for value in values]


def write_curve(curve: list[tuple[float, SuiteSummary]], stream: TextIO) -> None:
    """Write a sweep curve as `value,object_recall,relation_accuracy` CSV; N/A accuracy is left empty."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["value", "object_recall", "relation_accuracy"])
    for value, summary in curve:
        accuracy = "" if summary.relation_accuracy is None else repr(summary.relation_accuracy)
        writer.writerow([repr(value), repr(summary.object_recall), accuracy])


def _translate(box: BBox, center: tuple[float, float]) -> BBox:
    """Move a box so its centre is as close to `center` as the canvas allows."""
    cx = min(max(center[0], box.width / 2), 1 - box.width / 2)
    cy = min(max(center[1], box.height / 2), 1 - box.height / 2)
    return BBox.from_center(cx, cy, box.width, box.height)
