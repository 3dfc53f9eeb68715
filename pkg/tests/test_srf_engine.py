# type: ignore
# pylint: disable=redefined-outer-name, missing-function-docstring, missing-class-docstring
# pylint: disable=unsubscriptable-object, wrong-import-order

import numpy as np
import pytest

from app.core.config import RunConfig
from app.core.exceptions import (
    ConfigError,
    DirectiveFailedError,
    MissingAnchorError,
    MissingLayoutError,
    NonFiniteGradientError,
    ShapeMismatchError,
)
from app.diffusion.ddim import ddim_inversion
from app.diffusion.schedule import linear_schedule
from app.entity.directive import DirectiveMode, EditingDirective, Entity, SynthesisDirective, TokenVocabulary
from app.entity.latent import AttentionStack, LatentGrid
from app.entity.layout import BBox, LayoutMask, LayoutReport, MaskSource
from app.entity.trace import attention_mass
from app.service.gradcheck import check_latent_gradient, check_logit_gradient
from app.service.layout_engine import rasterize_mask
from app.service.srf_engine import (
    FusionConfig,
    SRFEngine,
    SRFState,
    StimulusConfig,
    fuse_latents,
    latent_response,
    mask_schedule,
    normalized_reference,
    stimulus_gradient,
    stimulus_loss,
    union_mask,
)
from in_memory_deps import NaNGradientDenoiser, UnpromptedDenoiser

SHAPE = (4, 16, 16)
LEFT_BOX = BBox(0.05, 0.35, 0.35, 0.65)


@pytest.fixture
def engine(config, denoiser):
    return SRFEngine.from_config(config, denoiser)


def synthesis_state(engine, denoiser, seed, box=LEFT_BOX, mask=None):
    background = LatentGrid.random(SHAPE, [seed, 1])
    trajectory = ddim_inversion(background, denoiser, engine.sched, [])
    vocab = TokenVocabulary()
    vocab.add("cat")
    mask = mask if mask is not None else rasterize_mask(box, 16, 16)
    start = LatentGrid.random(SHAPE, [seed, 2], step_index=engine.sched.steps)
    return SRFState(start, trajectory, {"cat": mask}, DirectiveMode.SYNTHESIS, vocab)


def half_masses(probabilities):
    return float(probabilities[:, :8].sum()), float(probabilities[:, 8:].sum())


def test_stimulus_loss_uniform_example():
    mask = LayoutMask.full(2, 2)

    loss, grads = stimulus_loss(AttentionStack({0: np.zeros((2, 2))}), {0: mask}, 0.8)

    assert loss == pytest.approx(1.21, abs=1e-12)
    # uniform attention and a uniform target: no direction improves the loss
    np.testing.assert_allclose(grads[0], 0.0, atol=1e-15)


def test_stimulus_loss_sums_over_tokens():
    attn = AttentionStack({0: np.zeros((2, 2)), 1: np.zeros((2, 2))})
    masks = {0: LayoutMask.full(2, 2), 1: LayoutMask.empty(2, 2)}

    loss, _ = stimulus_loss(attn, masks, 0.8)

    assert loss == pytest.approx(1.21 + 4 * 0.25**2)


def test_stimulus_loss_accepts_float_targets():
    target = np.full((2, 2), 0.25)

    loss, _ = stimulus_loss(AttentionStack({0: np.zeros((2, 2))}), {0: target}, 1.0)

    assert loss == pytest.approx(0.0, abs=1e-15)


def test_stimulus_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        stimulus_loss(AttentionStack({0: np.zeros((2, 2))}), {0: LayoutMask.full(3, 3)}, 0.8)


def test_logit_gradient_matches_finite_differences():
    logits = np.random.default_rng(11).standard_normal((16, 16))
    mask = np.zeros((16, 16))
    mask[4, 9] = 1.0

    report = check_logit_gradient(logits, mask, 0.8, directions=20, seed=1)

    assert report.passed(1e-6)
    assert report.analytic_norm > 0


@pytest.mark.parametrize("seed", range(5))
def test_latent_gradient_matches_finite_differences(denoiser, seed):
    latent = LatentGrid.random(SHAPE, [seed, 3])
    targets = {0: rasterize_mask(LEFT_BOX, 16, 16), 2: rasterize_mask(BBox(0.6, 0.1, 0.9, 0.4), 16, 16)}

    report = check_latent_gradient(latent, denoiser, targets, 0.8, 50, directions=20, seed=seed)

    assert report.directions == 20
    assert report.passed(1e-5)


def test_latent_response_descends(denoiser):
    cfg = StimulusConfig()
    rng = np.random.default_rng(0)
    decreased = 0

    for seed in range(100):
        z = LatentGrid.random(SHAPE, seed, step_index=50)
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        targets = {0: rasterize_mask(BBox.from_center(cx, cy, 0.3, 0.3), 16, 16)}

        before, _ = stimulus_gradient(z, denoiser, targets, cfg.delta, 50)
        after, _ = stimulus_gradient(latent_response(z, denoiser, targets, cfg, 50), denoiser, targets, cfg.delta, 50)
        decreased += after < before

    assert decreased >= 95


def test_latent_response_with_zero_alpha_is_identity(denoiser, latent):
    targets = {0: LayoutMask.full(16, 16)}

    assert latent_response(latent, denoiser, targets, StimulusConfig(alpha=0.0), 10) is latent


def test_latent_response_inner_iterations(denoiser, latent):
    targets = {0: rasterize_mask(LEFT_BOX, 16, 16)}

    once = latent_response(latent, denoiser, targets, StimulusConfig(inner_iters=1), 50)
    twice = latent_response(latent, denoiser, targets, StimulusConfig(inner_iters=2), 50)
    again = latent_response(once, denoiser, targets, StimulusConfig(inner_iters=1), 50)

    np.testing.assert_array_equal(twice.data, again.data)


def test_latent_response_uses_alpha_schedule(denoiser, latent):
    targets = {0: rasterize_mask(LEFT_BOX, 16, 16)}
    cfg = StimulusConfig(alpha=40.0, alpha_schedule=lambda step: 0.0 if step > 1 else 10.0)

    assert cfg.alpha_at(1) == 10.0
    assert latent_response(latent, denoiser, targets, cfg, 40, step=2) is latent


def test_latent_response_non_finite(latent):
    targets = {0: rasterize_mask(LEFT_BOX, 16, 16)}

    with pytest.raises(NonFiniteGradientError) as exc_info:
        latent_response(latent, NaNGradientDenoiser(), targets, StimulusConfig(), 50, step=3)

    assert exc_info.value.step == 3
    assert "loss" in exc_info.value.diagnostics


@pytest.mark.parametrize(
    "kwargs",
    [{"delta": 0.0}, {"delta": 1.5}, {"alpha": -1.0}, {"stimulus_steps": -1}, {"inner_iters": 0}],
)
def test_stimulus_config_validation(kwargs):
    with pytest.raises(ConfigError):
        StimulusConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [{"tau": -1}, {"attn_quantile": 0.0}, {"attn_quantile": 1.0}])
def test_fusion_config_validation(kwargs):
    with pytest.raises(ConfigError):
        FusionConfig(**kwargs)


def test_fusion_identities(latent):
    background = LatentGrid.random(SHAPE, 99)

    full = fuse_latents(latent, background, LayoutMask.full(16, 16))
    empty = fuse_latents(latent, background, LayoutMask.empty(16, 16))

    np.testing.assert_array_equal(full.data, latent.data)
    np.testing.assert_array_equal(empty.data, background.data)


def test_fusion_matches_elementwise_blend():
    rng = np.random.default_rng(5)

    for _ in range(1000):
        c, h, w = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
        z_star = LatentGrid(rng.standard_normal((c, h, w)))
        z_bg = LatentGrid(rng.standard_normal((c, h, w)))
        grid = rng.random((h, w)) < 0.5

        fused = fuse_latents(z_star, z_bg, LayoutMask(grid, MaskSource.FROM_BOX))

        m = grid.astype(float)[None, :, :]
        np.testing.assert_array_equal(fused.data, m * z_star.data + (1 - m) * z_bg.data)


def test_fusion_checkerboard():
    z_star, z_bg = LatentGrid(np.ones((2, 4, 4))), LatentGrid(np.zeros((2, 4, 4)))
    checkerboard = (np.indices((4, 4)).sum(axis=0) % 2).astype(bool)

    fused = fuse_latents(z_star, z_bg, LayoutMask(checkerboard, MaskSource.FROM_BOX))

    for channel in fused.data:
        np.testing.assert_array_equal(channel, checkerboard.astype(float))


def test_fusion_shape_mismatch(latent):
    with pytest.raises(ShapeMismatchError):
        fuse_latents(latent, LatentGrid.zeros((4, 8, 8)), LayoutMask.full(16, 16))
    with pytest.raises(ShapeMismatchError):
        fuse_latents(latent, latent, LayoutMask.full(8, 8))


def test_mask_schedule_exhaustive():
    box = LayoutMask.full(2, 2, MaskSource.FROM_BOX)
    attn = LayoutMask.empty(2, 2, MaskSource.FROM_ATTENTION)
    mismatches = 0

    for tau in range(51):
        for step in range(1, 51):
            expected = box if step <= tau else attn
            mismatches += mask_schedule(step, tau, box, attn) is not expected

    assert mismatches == 0


def test_union_mask():
    a = rasterize_mask(BBox(0.0, 0.0, 0.5, 0.5), 4, 4)
    b = rasterize_mask(BBox(0.5, 0.5, 1.0, 1.0), 4, 4)

    assert union_mask([a, b]).grid.sum() == 8


def test_state_validation(sched, denoiser, latent):
    trajectory = ddim_inversion(latent, denoiser, sched, [])

    with pytest.raises(ValueError):
        SRFState(latent, trajectory, {}, DirectiveMode.SYNTHESIS, TokenVocabulary())

    masks = {"cat": LayoutMask.full(16, 16), "dog": LayoutMask.full(8, 8)}
    with pytest.raises(ShapeMismatchError):
        SRFState(trajectory[-1], trajectory, masks, DirectiveMode.SYNTHESIS, TokenVocabulary())


def test_engine_rejects_windows_longer_than_schedule(denoiser):
    with pytest.raises(ConfigError):
        SRFEngine(denoiser, linear_schedule(10), StimulusConfig(stimulus_steps=25))
    with pytest.raises(ConfigError):
        SRFEngine(denoiser, linear_schedule(10), StimulusConfig(stimulus_steps=5), FusionConfig(tau=40))
    with pytest.raises(ConfigError):
        SRFEngine(denoiser, linear_schedule(50), prompt_strength=-1.0)


def test_engine_from_config_overrides(config, denoiser):
    engine = SRFEngine.from_config(config, denoiser, alpha=0.0, tau=10, fusion=False, prompt_strength=1.5)

    assert engine.stimulus.alpha == 0.0
    assert engine.prompt_strength == 1.5
    assert SRFEngine.from_config(config, denoiser).prompt_strength == config.prompt_strength
    assert engine.fusion.tau == 10
    assert not engine.fusion.enabled
    assert engine.sched.steps == 50
    assert engine.layout_engine.proximity_ratio == config.proximity_ratio


def test_run_directive_trace(engine, denoiser):
    state = synthesis_state(engine, denoiser, 0)

    z, trace = engine.run_directive(state, SynthesisDirective(Entity("cat")))

    assert z.step_index == 0
    assert [r.step for r in trace.records] == list(range(1, 51))
    assert [r.t for r in trace.records] == list(range(50, 0, -1))
    assert [r.stimulated for r in trace.records] == [True] * 25 + [False] * 25
    assert {r.mask_source for r in trace.records[:40]} == {MaskSource.FROM_BOX}
    assert {r.mask_source for r in trace.records[40:]} == {MaskSource.FROM_ATTENTION}
    assert trace.tokens == [0]
    assert sorted(trace.snapshots) == list(range(1, 51))
    assert trace.final_attention is not None
    assert trace.fusion_mask.source is MaskSource.FROM_ATTENTION


def test_synthesis_raises_attention_inside_mask(engine, denoiser):
    state = synthesis_state(engine, denoiser, 4)
    mask = state.masks["cat"]

    _, trace = engine.run_directive(state, SynthesisDirective(Entity("cat")))

    before = attention_mass(trace.initial_attention.probabilities(0), mask)
    after = attention_mass(trace.final_attention.probabilities(0), mask)
    assert after > before


def test_monotone_attention_capture(engine, denoiser):
    for seed in range(5):
        state = synthesis_state(engine, denoiser, seed)
        _, trace = engine.run_directive(state, SynthesisDirective(Entity("cat")))

        mask = state.masks["cat"]
        start = attention_mass(trace.initial_attention.probabilities(0), mask)
        end = attention_mass(trace.final_attention.probabilities(0), mask)
        assert end >= start, seed


def test_stimulus_efficacy_against_no_stimulus(config, denoiser):
    stimulated = SRFEngine.from_config(config, denoiser)
    baseline = SRFEngine.from_config(config, denoiser, alpha=0.0)
    wins = descending = 0

    for seed in range(50):
        state = synthesis_state(stimulated, denoiser, seed)
        mask = state.masks["cat"]
        directive = SynthesisDirective(Entity("cat"))

        _, trace = stimulated.run_directive(state, directive)
        _, base = baseline.run_directive(state, directive)

        final = attention_mass(trace.final_attention.probabilities(0), mask)
        wins += final > attention_mass(base.final_attention.probabilities(0), mask)
        descending += trace.losses[config.stimulus_steps - 1] < trace.losses[0]

    assert wins >= 48
    assert descending >= 48


def test_zero_masks_without_stimulus_return_background(config, denoiser):
    engine = SRFEngine.from_config(config, denoiser, alpha=0.0, tau=config.steps)
    state = synthesis_state(engine, denoiser, 1, mask=LayoutMask.empty(16, 16))

    z, trace = engine.run_directive(state, SynthesisDirective(Entity("cat")))

    np.testing.assert_array_equal(z.data, state.bg_trajectory[0].data)
    assert not any(r.stimulated for r in trace.records)


def test_run_directive_missing_mask(engine, denoiser):
    state = synthesis_state(engine, denoiser, 0)

    with pytest.raises(MissingLayoutError):
        engine.run_directive(state, SynthesisDirective(Entity("dog")))


def test_run_directive_is_deterministic(engine, denoiser):
    runs = [engine.run_directive(synthesis_state(engine, denoiser, 2), SynthesisDirective(Entity("cat"))) for _ in "ab"]

    np.testing.assert_array_equal(runs[0][0].data, runs[1][0].data)
    assert runs[0][1].losses == runs[1][1].losses


def test_progressive_left_and_right(engine, denoiser, parser):
    script = parser.decompose("add a cat on the left of the image, then add a dog on the right of the image")
    vocab = TokenVocabulary.from_script(script)
    dog = vocab["dog"]

    result = engine.run_progressive(LatentGrid.random(SHAPE, 0), script, seed=0, vocab=vocab)

    assert len(result.stages) == 2
    cat_left, cat_right = half_masses(result.stages[0].trace.final_attention.probabilities(vocab["cat"]))
    assert cat_left > cat_right
    # the dog stage moves dog attention into the right half of the scene it received
    _, dog_right_before = half_masses(denoiser.denoise(result.stages[0].latent, 1, [dog]).attention.probabilities(dog))
    _, dog_right_after = half_masses(result.stages[1].trace.final_attention.probabilities(dog))
    assert dog_right_after > dog_right_before
    assert result.stages[1].layout.boxes["dog"].center[0] > 0.5
    assert list(result.layout.boxes) == ["cat", "dog"]
    assert set(result.masks) == {"cat", "dog"}
    assert sorted(result.scene_attention.tokens) == sorted(vocab.ids.values())


def test_progressive_synthesis_edit_erase(engine, parser):
    script = parser.decompose("add a cat. then change the cat to a rabbit. then delete the rabbit")
    vocab = TokenVocabulary.from_script(script)

    result = engine.run_progressive(LatentGrid.random(SHAPE, 0), script, seed=0, vocab=vocab)

    modes = [s.trace.mode for s in result.stages]
    assert modes == [DirectiveMode.SYNTHESIS, DirectiveMode.EDITING, DirectiveMode.ERASING]
    assert list(result.stages[0].layout.boxes) == ["cat"]
    assert list(result.stages[1].layout.boxes) == ["rabbit"]
    assert result.stages[2].layout.boxes == {}
    assert set(result.stages[1].masks) == {"rabbit"}
    assert result.masks == {}

    # editing and erasing leave every cell outside their fixed mask untouched
    for previous, stage in zip(result.stages, result.stages[1:]):
        outside = ~stage.trace.fusion_mask.grid
        np.testing.assert_array_equal(stage.latent.data[:, outside], previous.latent.data[:, outside])
        assert {r.mask_source for r in stage.trace.records} == {MaskSource.FROM_ATTENTION}


def test_editing_moves_target_attention_into_source_region(config, denoiser, parser):
    # prompt prior off: the stimulus alone has to move the target
    stimulated = SRFEngine.from_config(config, denoiser, prompt_strength=0.0)
    baseline = SRFEngine.from_config(config, denoiser, alpha=0.0, prompt_strength=0.0)
    script = parser.decompose("add a cat on the left of the image. then change the cat to a rabbit")
    vocab = TokenVocabulary.from_script(script)
    rabbit = vocab["rabbit"]
    cat_only = parser.decompose("add a cat on the left of the image")
    edit = parser.decompose("change the cat to a rabbit")
    wins = 0

    for seed in range(10):
        scene = stimulated.run_progressive(LatentGrid.random(SHAPE, seed), cat_only, seed=seed, vocab=vocab)
        masses = []
        for stage_engine in (stimulated, baseline):
            trace = stage_engine.run_progressive(scene.final, edit, seed=seed, vocab=vocab).stages[0].trace
            masses.append(attention_mass(trace.final_attention.probabilities(rabbit), trace.masks[rabbit]))
        wins += masses[0] > masses[1]

    assert wins >= 8
    assert script.directives[1] == edit.directives[0]


def test_editing_without_reference_attention(engine, denoiser):
    state = synthesis_state(engine, denoiser, 0)
    state.vocab.add("rabbit")

    with pytest.raises(MissingLayoutError):
        engine.run_directive(state, EditingDirective(Entity("cat"), Entity("rabbit")))


def test_normalized_reference():
    peaked = np.full((4, 4), 0.05)
    peaked[1, 2] = 0.25

    np.testing.assert_array_equal(normalized_reference(np.full((4, 4), 1 / 16)), np.ones((4, 4)))
    reference = normalized_reference(peaked)
    assert reference[1, 2] == 1.0
    assert reference.max() == 1.0
    assert reference[0, 0] == pytest.approx(0.2)


def test_prompt_prior_raises_logits_inside_region(config, denoiser, latent):
    engine = SRFEngine.from_config(config, denoiser)
    region = rasterize_mask(LEFT_BOX, 16, 16)

    prompted = engine.prompt_prior(latent, {0: region}, [0, 2])

    before = denoiser.denoise(latent, 1, [0, 2]).attention
    after = denoiser.denoise(prompted, 1, [0, 2]).attention
    shift = after[0] - before[0]
    np.testing.assert_allclose(shift[region.grid], config.prompt_strength)
    np.testing.assert_array_equal(shift[~region.grid], 0.0)
    # other entities of the scene keep their logits
    np.testing.assert_allclose(after[2], before[2], atol=1e-10)
    assert prompted.step_index == latent.step_index


def test_prompt_prior_is_skipped(config, denoiser, latent):
    region = {0: LayoutMask.full(16, 16)}

    assert SRFEngine.from_config(config, UnpromptedDenoiser()).prompt_prior(latent, region, []) is latent
    assert SRFEngine.from_config(config, denoiser, prompt_strength=0.0).prompt_prior(latent, region, []) is latent
    assert SRFEngine.from_config(config, denoiser).prompt_prior(latent, {}, [0]) is latent


def test_prompt_prior_places_entity_without_stimulus(denoiser, parser):
    engine = SRFEngine(denoiser, linear_schedule(50), StimulusConfig(alpha=0.0), prompt_strength=4.0)
    script = parser.decompose("add a cat on the left of the image")
    cat = TokenVocabulary.from_script(script)["cat"]

    result = engine.run_progressive(LatentGrid.random(SHAPE, 2), script, seed=2)

    # without any stimulus the prior and the box fusion alone place the cat
    mask = result.masks["cat"]
    assert attention_mass(result.scene_attention.probabilities(cat), mask) > 0.5


def test_erasing_flattens_attention(engine, denoiser, parser):
    script = parser.decompose("add a cat on the left of the image. then delete the cat")
    vocab = TokenVocabulary.from_script(script)
    cat = vocab["cat"]

    result = engine.run_progressive(LatentGrid.random(SHAPE, 1), script, seed=1, vocab=vocab)

    def peakedness(probabilities):
        return float(probabilities.max() / probabilities.mean())

    before = denoiser.denoise(result.stages[0].latent, 1, [cat]).attention.probabilities(cat)
    after = result.stages[1].trace.final_attention.probabilities(cat)
    assert peakedness(after) < peakedness(before)


def test_progressive_respects_anchors(engine, parser):
    script = parser.decompose("add a lamp on top of the table")
    anchors = LayoutReport({"table": BBox(0.3, 0.5, 0.7, 0.9)})

    result = engine.run_progressive(LatentGrid.random(SHAPE, 0), script, anchors=anchors, seed=0)

    lamp = result.layout.boxes["lamp"]
    assert lamp.center[1] < 0.7
    assert 0.3 < lamp.center[0] < 0.7
    assert "table" in result.layout.boxes


def test_progressive_is_deterministic(engine, parser):
    script = parser.decompose("add a man wearing a hat. then delete the hat")

    runs = [engine.run_progressive(LatentGrid.random(SHAPE, 5), script, seed=5) for _ in "ab"]

    for a, b in zip(runs[0].stages, runs[1].stages):
        np.testing.assert_array_equal(a.latent.data, b.latent.data)
        assert a.trace.losses == b.trace.losses


def test_progressive_failure_keeps_partial_result(engine, parser):
    script = parser.decompose("add a cat on the left of the image. then add a dog next to the sofa")

    with pytest.raises(DirectiveFailedError) as exc_info:
        engine.run_progressive(LatentGrid.random(SHAPE, 0), script, seed=0)

    error = exc_info.value
    assert error.stage_index == 1
    assert isinstance(error.__cause__, MissingAnchorError)
    assert len(error.partial.stages) == 1
    assert error.partial.failure


def test_progressive_non_finite_gradient(config, parser):
    engine = SRFEngine.from_config(config, NaNGradientDenoiser())

    with pytest.raises(DirectiveFailedError) as exc_info:
        engine.run_progressive(LatentGrid.random(SHAPE, 0), parser.decompose("add a cat"), seed=0)

    assert isinstance(exc_info.value.__cause__, NonFiniteGradientError)
    assert exc_info.value.partial.stages == []


def test_small_config_runs(small_config, parser):
    from app.diffusion.reference import ReferenceDenoiser

    denoiser = ReferenceDenoiser(4, 8, 8)
    engine = SRFEngine.from_config(small_config, denoiser)

    result = engine.run_progressive(LatentGrid.random((4, 8, 8), 0), parser.decompose("add a cat"), seed=0)

    assert result.final.shape == (4, 8, 8)
    assert len(result.stages[0].trace.records) == 10


def test_config_defaults_match_engine_defaults():
    config = RunConfig.build()

    assert StimulusConfig().delta == config.delta
    assert StimulusConfig().alpha == config.alpha
    assert FusionConfig().tau == config.tau
