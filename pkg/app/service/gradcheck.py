from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from app.entity.latent import AttentionStack, FloatArray, LatentGrid
from app.entity.layout import LayoutMask
from app.interface.denoiser import BaseDenoiser
from app.service.srf_engine import stimulus_gradient, stimulus_loss

# central-difference step; round-off dominates below it on float64 losses of order one
DEFAULT_STEP = 1e-4


@dataclass
class GradcheckReport:
    """Outcome of a finite-difference check."""

    directions: int
    max_rel_error: float
    analytic_norm: float

    def passed(self, tolerance: float) -> bool:
        """Whether every direction stayed under `tolerance`."""
        return self.max_rel_error < tolerance


def check_gradient(
    f: Callable[[FloatArray], float],
    x: FloatArray,
    grad: FloatArray,
    directions: int = 20,
    h: float = DEFAULT_STEP,
    seed: int = 0,
) -> GradcheckReport:
    """
    Compare an analytic gradient with central differences along random unit directions.

    Args:
        f (Callable[[FloatArray], float]): Scalar function.
        x (FloatArray): Point the gradient was computed at.
        grad (FloatArray): Analytic gradient of `f` at `x`.
        directions (int): Number of random directions.
        h (float): Finite-difference step.
        seed (int): Seed of the directions.

    Returns:
        GradcheckReport: Largest relative error over the directions.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v)
        numeric = (f(x + h * v) - f(x - h * v)) / (2 * h)
        analytic = float(np.sum(grad * v))
        scale = max(abs(numeric), abs(analytic), 1e-300)
        worst = max(worst, abs(numeric - analytic) / scale)
    return GradcheckReport(directions, worst, float(np.linalg.norm(grad)))


def check_logit_gradient(
    logits: FloatArray,
    mask: LayoutMask | FloatArray,
    delta: float,
    directions: int = 20,
    seed: int = 0,
    h: float = DEFAULT_STEP,
) -> GradcheckReport:
    """Check the stimulus loss gradient with respect to one token's logits."""
    _, grad = stimulus_loss(AttentionStack({0: logits}), {0: mask}, delta)
    return check_gradient(
        lambda a: stimulus_loss(AttentionStack({0: a}), {0: mask}, delta)[0],
        logits,
        grad[0],
        directions=directions,
        h=h,
        seed=seed,
    )


def check_latent_gradient(
    z: LatentGrid,
    denoiser: BaseDenoiser,
    targets: dict[int, LayoutMask | FloatArray],
    delta: float,
    t: int,
    directions: int = 20,
    seed: int = 0,
    h: float = DEFAULT_STEP,
) -> GradcheckReport:
    """Check the stimulus loss gradient with respect to the latent, chained through the denoiser's attention."""
    _, grad = stimulus_gradient(z, denoiser, targets, delta, t)
    return check_gradient(
        lambda data: stimulus_gradient(z.with_data(data), denoiser, targets, delta, t)[0],
        z.data,
        grad,
        directions=directions,
        h=h,
        seed=seed,
    )
