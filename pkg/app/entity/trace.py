from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .directive import Directive, DirectiveMode
from .latent import AttentionStack, FloatArray, LatentGrid
from .layout import LayoutMask, LayoutReport, MaskSource


@dataclass
class StepRecord:
    """
    One reverse step of a directive run.

    Attributes:
        step (int): Completed reverse steps, ascending from 1.
        t (int): Diffusion time the step starts from.
        loss (float): Stimulus loss before the response update.
        mask_source (MaskSource | None): Source of the fusion mask, None when fusion is off.
        attention_mass_in_mask (float): Softmax attention of the stimulated tokens inside their masks, averaged.
        stimulated (bool): Whether the latent response ran at this step.
    """

    step: int
    t: int
    loss: float
    mask_source: MaskSource | None
    attention_mass_in_mask: float
    stimulated: bool = False

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready view."""
        return {
            "step": self.step,
            "t": self.t,
            "loss": self.loss,
            "mask_source": None if self.mask_source is None else str(self.mask_source),
            "attention_mass_in_mask": self.attention_mass_in_mask,
            "stimulated": self.stimulated,
        }


@dataclass
class RunTrace:
    """
    Everything recorded while running one directive.

    Attributes:
        mode (DirectiveMode): Mode of the directive.
        tokens (list[int]): Stimulated token ids.
        records (list[StepRecord]): Per-step records in execution order.
        snapshots (dict[int, AttentionStack]): Attention of the stimulated tokens per step.
        initial_attention (AttentionStack | None): Attention of the stimulated tokens at the first step.
        final_attention (AttentionStack | None): Attention read off the output latent.
        masks (dict[int, LayoutMask]): Stimulus mask per token.
        fusion_mask (LayoutMask | None): Fusion mask of the last step, None when fusion is off.
    """

    mode: DirectiveMode
    tokens: list[int]
    records: list[StepRecord] = field(default_factory=list)
    snapshots: dict[int, AttentionStack] = field(default_factory=dict)
    initial_attention: AttentionStack | None = None
    final_attention: AttentionStack | None = None
    masks: dict[int, LayoutMask] = field(default_factory=dict)
    fusion_mask: LayoutMask | None = None

    @property
    def losses(self) -> list[float]:
        """Loss series."""
        return [r.loss for r in self.records]

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready view."""
        return {"mode": str(self.mode), "tokens": self.tokens, "steps": [r.as_dict() for r in self.records]}


@dataclass
class StageResult:
    """Output of one progressive stage."""

    directive: Directive
    latent: LatentGrid
    trace: RunTrace
    layout: LayoutReport
    masks: dict[str, LayoutMask]


@dataclass
class ProgressiveResult:
    """
    Output of a whole directive script.

    Attributes:
        background (LatentGrid): Input latent of the first stage.
        stages (list[StageResult]): One result per directive.
        scene_attention (AttentionStack | None): Attention of every script token read off the final latent.
        failure (str | None): Message of the directive that aborted the run, if any.
    """

    background: LatentGrid
    stages: list[StageResult] = field(default_factory=list)
    scene_attention: AttentionStack | None = None
    failure: str | None = None

    @property
    def final(self) -> LatentGrid:
        """Latent after the last completed stage."""
        return self.stages[-1].latent if self.stages else self.background

    @property
    def layout(self) -> LayoutReport:
        """Layout after the last completed stage."""
        return self.stages[-1].layout if self.stages else LayoutReport()

    @property
    def masks(self) -> dict[str, LayoutMask]:
        """Masks of the entities present after the last completed stage."""
        return self.stages[-1].masks if self.stages else {}


@dataclass
class DirectiveRecord:
    """Per-directive evaluation record."""

    index: int
    mode: DirectiveMode
    entities: list[str]
    attention_mass: dict[str, float]
    relations_total: int
    relations_satisfied: int


@dataclass
class MetricReport:
    """
    Desk-scale metrics of a run.

    Attributes:
        object_recall (float): Fraction of present objects whose final attention mass reaches the threshold.
        relation_accuracy (float | None): Fraction of satisfied relation descriptions; None when there are none.
        records (list[DirectiveRecord]): One record per directive.
        degraded (bool): Whether the run was degraded (non-finite gradient or distorted latent).
    """

    object_recall: float
    relation_accuracy: float | None
    records: list[DirectiveRecord] = field(default_factory=list)
    degraded: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.object_recall <= 1.0:
            raise ValueError("object_recall must be a fraction")
        if self.relation_accuracy is not None and not 0.0 <= self.relation_accuracy <= 1.0:
            raise ValueError("relation_accuracy must be a fraction")

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready view."""
        return {
            "object_recall": self.object_recall,
            "relation_accuracy": self.relation_accuracy,
            "degraded": self.degraded,
            "records": [
                {
                    "index": r.index,
                    "mode": str(r.mode),
                    "entities": r.entities,
                    "attention_mass": r.attention_mass,
                    "relations_total": r.relations_total,
                    "relations_satisfied": r.relations_satisfied,
                }
                for r in self.records
            ],
        }


def attention_mass(probabilities: FloatArray, mask: LayoutMask) -> float:
    """Softmax attention mass inside a mask."""
    return float(probabilities[mask.grid].sum())
