import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from app.core.config import RunConfig, common_settings
from app.core.exceptions import (
    BaseError,
    ConfigError,
    DirectiveFailedError,
    MissingLayoutError,
    NonFiniteGradientError,
    ShapeMismatchError,
)
from app.diffusion.ddim import ddim_inversion, ddim_reverse_step
from app.diffusion.schedule import linear_schedule
from app.entity.directive import (
    Directive,
    DirectiveMode,
    DirectiveScript,
    EditingDirective,
    ErasingDirective,
    SynthesisDirective,
    TokenVocabulary,
)
from app.entity.latent import AttentionStack, FloatArray, LatentGrid, NoiseSchedule, spatial_softmax
from app.entity.layout import LayoutMask, LayoutReport, MaskSource
from app.entity.trace import ProgressiveResult, RunTrace, StageResult, StepRecord, attention_mass
from app.interface.denoiser import BaseDenoiser
from app.service.layout_engine import LayoutEngine, attention_to_mask, rasterize_mask

logger = logging.getLogger(__name__)

# time index used to read attention off a clean latent
READOUT_T = 1


@dataclass
class StimulusConfig:
    """
    Stimulus and latent response parameters.

    Attributes:
        delta (float): Stimulus weight, in (0, 1].
        alpha (float): Response step size, constant over steps unless `alpha_schedule` is set.
        stimulus_steps (int): Number of initial reverse steps the stimulus is applied on.
        inner_iters (int): Gradient iterations per stimulated step.
        alpha_schedule (Callable[[int], float] | None): Step size per ascending step, overrides `alpha`.
    """

    delta: float = 0.8
    alpha: float = 40.0
    stimulus_steps: int = 25
    inner_iters: int = 1
    alpha_schedule: Callable[[int], float] | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("delta must lie in (0, 1]")
        if self.alpha < 0 or self.stimulus_steps < 0 or self.inner_iters < 1:
            raise ConfigError("alpha and stimulus_steps must be non-negative, inner_iters positive")

    def alpha_at(self, step: int) -> float:
        """Step size of an ascending step."""
        return self.alpha if self.alpha_schedule is None else self.alpha_schedule(step)


@dataclass
class FusionConfig:
    """
    Fusion parameters.

    Attributes:
        tau (int): Step after which the fusion mask switches from the box mask to the attention mask.
        attn_quantile (float): Quantile the averaged attention is thresholded at.
        enabled (bool): When off the fusion mask is all-ones and the background is ignored.
    """

    tau: int = 40
    attn_quantile: float = 0.75
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ConfigError("tau must be non-negative")
        if not 0.0 < self.attn_quantile < 1.0:
            raise ConfigError("attn_quantile must lie in (0, 1)")


@dataclass
class SRFState:
    """
    Inputs of one directive run.

    Attributes:
        z (LatentGrid): Starting latent z_T.
        bg_trajectory (list[LatentGrid]): Inverted background, element t being z^bg_t.
        masks (dict[str, LayoutMask]): Mask per entity name.
        mode (DirectiveMode): Mode of the directive to run.
        vocab (TokenVocabulary): Token ids of entity names.
        reference_attention (AttentionStack | None): Reference logits per stimulated token (editing/erasing).
    """

    z: LatentGrid
    bg_trajectory: list[LatentGrid]
    masks: dict[str, LayoutMask]
    mode: DirectiveMode
    vocab: TokenVocabulary
    reference_attention: AttentionStack | None = None

    def __post_init__(self) -> None:
        if self.z.step_index != len(self.bg_trajectory) - 1:
            msg = f"Starting latent is at t={self.z.step_index}, trajectory has {len(self.bg_trajectory)} latents"
            raise ValueError(msg)
        shapes = {m.shape for m in self.masks.values()}
        if len(shapes) > 1:
            raise ShapeMismatchError("Masks of a run must share one shape")


def stimulus_loss(
    attn: AttentionStack,
    targets: Mapping[int, LayoutMask | FloatArray],
    delta: float,
) -> tuple[float, AttentionStack]:
    """
    Squared mismatch between softmaxed attention and the delta-scaled target, summed over tokens and cells.

    The gradient with respect to the logits of token i is p * (r - <p, r>) with p = softmax(A_i) and
    r = 2 (p - delta * M_i).

    Args:
        attn (AttentionStack): Pre-softmax logits covering every target token.
        targets (Mapping[int, LayoutMask | FloatArray]): Target mask (or float map) per stimulated token.
        delta (float): Stimulus weight.

    Raises:
        ShapeMismatchError: If a target and its attention plane disagree in shape.

    Returns:
        tuple[float, AttentionStack]: Loss and its gradient with respect to the logits.
    """
    loss = 0.0
    grads: dict[int, FloatArray] = {}
    for token, target in targets.items():
        logits = attn[token]
        m = target.as_float() if isinstance(target, LayoutMask) else target
        if m.shape != logits.shape:
            msg = f"Target of token {token} is {m.shape}, attention is {logits.shape}"
            raise ShapeMismatchError(msg)
        p = spatial_softmax(logits)
        diff = p - delta * m
        loss += float(np.sum(diff**2))
        r = 2.0 * diff
        grads[token] = p * (r - float(np.sum(p * r)))
    return loss, AttentionStack(grads)


def stimulus_gradient(
    z: LatentGrid,
    denoiser: BaseDenoiser,
    targets: Mapping[int, LayoutMask | FloatArray],
    delta: float,
    t: int,
) -> tuple[float, FloatArray]:
    """Stimulus loss at `z` and its gradient with respect to the latent."""
    tokens = list(targets)
    out = denoiser.denoise(z, t, tokens)
    loss, grad_attn = stimulus_loss(out.attention, targets, delta)
    return loss, denoiser.attention_vjp(z, t, tokens, grad_attn.maps)


def latent_response(
    z_t: LatentGrid,
    denoiser: BaseDenoiser,
    targets: Mapping[int, LayoutMask | FloatArray],
    cfg: StimulusConfig,
    t: int,
    step: int = 1,
) -> LatentGrid:
    """
    Move the latent down the stimulus loss gradient, `cfg.inner_iters` times.

    Raises:
        NonFiniteGradientError: If the gradient or the updated latent is not finite.

    Returns:
        LatentGrid: The responsive latent z*_t.
    """
    alpha = cfg.alpha_at(step)
    if alpha == 0.0:
        return z_t
    z = z_t
    for _ in range(cfg.inner_iters):
        loss, grad = stimulus_gradient(z, denoiser, targets, cfg.delta, t)
        if not np.isfinite(grad).all() or not np.isfinite(loss):
            raise NonFiniteGradientError(step, {"t": t, "loss": loss, "latent_norm": float(np.linalg.norm(z.data))})
        z = z.with_data(z.data - alpha * grad)
        if not z.is_finite():
            raise NonFiniteGradientError(step, {"t": t, "loss": loss, "grad_norm": float(np.linalg.norm(grad))})
    return z


def mask_schedule(step: int, tau: int, box_mask: LayoutMask, attn_mask: LayoutMask) -> LayoutMask:
    """Box mask up to step `tau` (ascending, from 1), the attention mask afterwards."""
    return box_mask if step <= tau else attn_mask


def fuse_latents(z_star: LatentGrid, z_bg: LatentGrid, mask: LayoutMask) -> LatentGrid:
    """
    Blend the responsive latent with the background: M * z* + (1 - M) * z_bg, the mask broadcast over channels.

    Raises:
        ShapeMismatchError: If the latents or the mask disagree in shape.
    """
    if z_star.shape != z_bg.shape or mask.shape != z_star.shape[1:]:
        msg = f"Cannot fuse {z_star.shape} with {z_bg.shape} under a {mask.shape} mask"
        raise ShapeMismatchError(msg)
    return z_star.with_data(np.where(mask.grid[None, :, :], z_star.data, z_bg.data))


def normalized_reference(probabilities: FloatArray) -> FloatArray:
    """
    Scale a softmaxed reference map so its peak is 1.

    The stimulus then pulls toward delta times a map on the same [0, 1] scale as a box mask; a uniform
    reference becomes all-ones.
    """
    return probabilities / probabilities.max()


def union_mask(masks: list[LayoutMask]) -> LayoutMask:
    """Cellwise union of masks of one shape."""
    grid = np.logical_or.reduce([m.grid for m in masks])
    return LayoutMask(grid, masks[0].source)


class SRFEngine:
    """Stimulus, response and fusion over a deterministic reverse diffusion."""

    def __init__(
        self,
        denoiser: BaseDenoiser,
        sched: NoiseSchedule,
        stimulus: StimulusConfig | None = None,
        fusion: FusionConfig | None = None,
        layout_engine: LayoutEngine | None = None,
        prompt_strength: float = 0.0,
    ) -> None:
        """
        Initialize SRFEngine.

        Args:
            denoiser (BaseDenoiser): Noise and attention predictor.
            sched (NoiseSchedule): Noise schedule.
            stimulus (StimulusConfig | None): Stimulus parameters, defaults when None.
            fusion (FusionConfig | None): Fusion parameters, defaults when None.
            layout_engine (LayoutEngine | None): Planner for synthesis directives.
            prompt_strength (float): Logit boost the prompt prior gives an inserted entity inside its region.
        """
        self.denoiser = denoiser
        self.sched = sched
        self.stimulus = stimulus or StimulusConfig()
        self.fusion = fusion or FusionConfig()
        self.layout_engine = layout_engine or LayoutEngine()
        self.prompt_strength = prompt_strength
        if prompt_strength < 0:
            raise ConfigError("prompt_strength must be non-negative")
        if self.stimulus.stimulus_steps > sched.steps or self.fusion.tau > sched.steps:
            raise ConfigError("stimulus_steps and tau cannot exceed the number of steps")

    @classmethod
    def from_config(cls, config: RunConfig, denoiser: BaseDenoiser, **overrides: object) -> "SRFEngine":
        """
        Build an engine from a run config.

        Keyword overrides `alpha`, `tau` and `prompt_strength` replace the configured values; `fusion=False`
        disables fusion.
        """
        stimulus = StimulusConfig(
            delta=config.delta,
            alpha=float(overrides.get("alpha", config.alpha)),  # type: ignore[arg-type]
            stimulus_steps=config.stimulus_steps,
            inner_iters=config.inner_iters,
        )
        fusion = FusionConfig(
            tau=int(overrides.get("tau", config.tau)),  # type: ignore[call-overload]
            attn_quantile=config.attn_quantile,
            enabled=bool(overrides.get("fusion", True)),
        )
        sched = linear_schedule(config.steps, config.beta_start, config.beta_end)
        prompt_strength = float(overrides.get("prompt_strength", config.prompt_strength))  # type: ignore[arg-type]
        return cls(denoiser, sched, stimulus, fusion, LayoutEngine.from_config(config), prompt_strength)

    def _targets(
        self,
        state: SRFState,
        directive: Directive,
    ) -> tuple[dict[int, LayoutMask | FloatArray], dict[int, LayoutMask], LayoutMask | None]:
        """Stimulus targets, per-token masks, and the fixed fusion mask (None for synthesis)."""
        match directive:
            case SynthesisDirective():
                masks: dict[int, LayoutMask] = {}
                for entity in directive.inserted:
                    if entity.name not in state.masks:
                        msg = f"No layout mask for '{entity.name}'"
                        raise MissingLayoutError(msg)
                    masks[state.vocab[entity.name]] = state.masks[entity.name]
                return dict(masks), masks, None
            case EditingDirective() | ErasingDirective() as d:
                source = d.source if isinstance(d, EditingDirective) else d.target
                token = state.vocab[d.target.name]
                if state.reference_attention is None or token not in state.reference_attention:
                    msg = f"{d.mode} run needs reference attention for token {token}"
                    raise MissingLayoutError(msg)
                if source.name not in state.masks:
                    msg = f"No mask for '{source.name}'"
                    raise MissingLayoutError(msg)
                fixed = state.masks[source.name]
                reference = normalized_reference(state.reference_attention.probabilities(token))
                return {token: reference}, {token: fixed}, fixed
        msg = f"Unsupported directive {directive!r}"
        raise TypeError(msg)

    def run_directive(self, state: SRFState, directive: Directive) -> tuple[LatentGrid, RunTrace]:
        """
        Run one directive from z_T down to z_0.

        Every reverse step denoises, applies the latent response inside the stimulus window (and denoises the
        responsive latent again), takes the deterministic update, and fuses the result with the background
        latent of the next time index. Synthesis fuses under the box mask up to `tau` and under the
        thresholded averaged attention afterwards; editing and erasing fuse under their fixed mask on every
        step.

        Raises:
            NonFiniteGradientError: If the response diverges.
            MissingLayoutError: If an entity has no mask.

        Returns:
            tuple[LatentGrid, RunTrace]: Output latent z_0 and the run trace.
        """
        targets, token_masks, fixed_mask = self._targets(state, directive)
        tokens = list(targets)
        box_mask = union_mask(list(token_masks.values()))
        trace = RunTrace(mode=directive.mode, tokens=tokens, masks=token_masks)

        z = state.z
        for t in range(self.sched.steps, 0, -1):
            step = self.sched.steps - t + 1
            out = self.denoiser.denoise(z, t, tokens)
            loss, _ = stimulus_loss(out.attention, targets, self.stimulus.delta)
            if trace.initial_attention is None:
                trace.initial_attention = out.attention

            stimulated = step <= self.stimulus.stimulus_steps and self.stimulus.alpha_at(step) > 0
            if stimulated:
                z = latent_response(z, self.denoiser, targets, self.stimulus, t, step)
                out = self.denoiser.denoise(z, t, tokens)

            z_star = ddim_reverse_step(z, out, t, self.sched)
            source: MaskSource | None = None
            if self.fusion.enabled:
                if fixed_mask is not None:
                    fusion_mask = fixed_mask
                else:
                    averaged = np.mean([out.attention.probabilities(k) for k in tokens], axis=0)
                    attn_mask = attention_to_mask(averaged, self.fusion.attn_quantile)
                    fusion_mask = mask_schedule(step, self.fusion.tau, box_mask, attn_mask)
                source = fusion_mask.source
                trace.fusion_mask = fusion_mask
                z = fuse_latents(z_star, state.bg_trajectory[t - 1], fusion_mask)
            else:
                z = z_star

            mass = float(np.mean([attention_mass(out.attention.probabilities(k), token_masks[k]) for k in tokens]))
            trace.records.append(StepRecord(step, t, loss, source, mass, stimulated))
            trace.snapshots[step] = out.attention
            if common_settings.debug:
                logger.debug("step %d t=%d loss=%.6f mass=%.4f", step, t, loss, mass)

        trace.final_attention = self.denoiser.denoise(z, READOUT_T, tokens).attention
        return z, trace

    def _reference(
        self,
        bg: LatentGrid,
        reference_token: int,
        stimulated_token: int,
        *,
        uniform: bool,
    ) -> AttentionStack:
        h, w = self.denoiser.attention_shape
        if uniform:
            return AttentionStack({stimulated_token: np.zeros((h, w))})
        logits = self.denoiser.denoise(bg, READOUT_T, [reference_token]).attention[reference_token]
        return AttentionStack({stimulated_token: logits})

    def _source_mask(self, bg: LatentGrid, token: int) -> LayoutMask:
        probabilities = self.denoiser.denoise(bg, READOUT_T, [token]).attention.probabilities(token)
        return attention_to_mask(probabilities, self.fusion.attn_quantile)

    def prompt_prior(self, z: LatentGrid, regions: dict[int, LayoutMask], present: list[int]) -> LatentGrid:
        """
        Add the denoiser's prompt directions to a starting latent, each token's only inside its region.

        `present` lists the other entity tokens of the scene; the directions leave their logits alone where
        the denoiser can. Denoisers without prompt directions return the latent unchanged.
        """
        if self.prompt_strength == 0.0 or not regions:
            return z
        tokens = list(dict.fromkeys([*regions, *present]))
        directions = self.denoiser.prompt_directions(tokens)
        if directions is None:
            return z
        offset = np.zeros_like(z.data)
        for row, token in enumerate(tokens):
            if token in regions:
                offset += np.multiply.outer(directions[row], regions[token].as_float())
        return z.with_data(z.data + self.prompt_strength * offset)

    def run_progressive(
        self,
        background: LatentGrid,
        script: DirectiveScript,
        anchors: LayoutReport | None = None,
        seed: int = 0,
        vocab: TokenVocabulary | None = None,
    ) -> ProgressiveResult:
        """
        Run a directive script stage by stage, each stage consuming the previous stage's output.

        Every stage inverts its input latent into a background trajectory. Synthesis stages plan boxes against
        the current layout and start from a fresh latent drawn from `default_rng([seed, stage])`; editing and
        erasing stages start from the inverted background, stimulate toward the reference attention and
        fuse under the source entity's attention mask. Inserted entities (and edit targets) get the prompt
        prior inside their region.

        Args:
            background (LatentGrid): Input latent of the first stage.
            script (DirectiveScript): Directives in execution order.
            anchors (LayoutReport | None): Boxes known before the first stage.
            seed (int): Seed of the synthesis starting latents and layout tie-breaking.
            vocab (TokenVocabulary | None): Token ids, built from the script when None.

        Raises:
            DirectiveFailedError: On the first failing directive; `partial` holds the completed stages.

        Returns:
            ProgressiveResult: Stage results and the scene attention of the final latent.
        """
        vocab = vocab or TokenVocabulary.from_script(script)
        result = ProgressiveResult(background=background)
        layout = anchors.copy() if anchors else LayoutReport()
        masks: dict[str, LayoutMask] = {}
        h, w = self.denoiser.attention_shape

        for index, directive in enumerate(script.directives):
            current = result.final
            try:
                bg_trajectory = ddim_inversion(current, self.denoiser, self.sched, [])
                layout = layout.copy()
                masks = dict(masks)
                reference: AttentionStack | None = None
                start = bg_trajectory[-1]

                match directive:
                    case SynthesisDirective():
                        boxes = self.layout_engine.place(directive, layout, seed)
                        layout.boxes.update(boxes)
                        masks.update({name: rasterize_mask(box, h, w) for name, box in boxes.items()})
                        start = LatentGrid.random(current.shape, [seed, index], step_index=self.sched.steps)
                        regions = {vocab[name]: masks[name] for name in boxes}
                        start = self.prompt_prior(start, regions, [vocab[name] for name in masks])
                    case EditingDirective(source=source, target=target):
                        masks[source.name] = self._source_mask(current, vocab[source.name])
                        reference = self._reference(current, vocab[source.name], vocab[target.name], uniform=False)
                        regions = {vocab[target.name]: masks[source.name]}
                        start = self.prompt_prior(start, regions, [vocab[name] for name in masks])
                    case ErasingDirective(target=target):
                        masks[target.name] = self._source_mask(current, vocab[target.name])
                        reference = self._reference(current, vocab[target.name], vocab[target.name], uniform=True)

                state = SRFState(start, bg_trajectory, masks, directive.mode, vocab, reference)
                latent, trace = self.run_directive(state, directive)
            except BaseError as exc:
                result.failure = str(exc)
                logger.warning("Directive %d (%s) failed: %s", index, directive.mode, exc)
                raise DirectiveFailedError(index, result, exc) from exc

            match directive:
                case EditingDirective(source=source, target=target):
                    masks[target.name] = masks.pop(source.name)
                    layout.boxes = {target.name if k == source.name else k: v for k, v in layout.boxes.items()}
                case ErasingDirective(target=target):
                    masks.pop(target.name, None)
                    layout.boxes.pop(target.name, None)

            result.stages.append(StageResult(directive, latent, trace, layout, masks))
            logger.info("Stage %d (%s) done, final loss %.6f", index, directive.mode, trace.losses[-1])

        result.scene_attention = self.denoiser.denoise(result.final, READOUT_T, sorted(vocab.ids.values())).attention
        return result
