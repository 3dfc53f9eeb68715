import logging

import numpy as np

from app.core.exceptions import ShapeMismatchError
from app.entity.latent import DenoiserOutput, FloatArray, LatentGrid, NoiseSchedule
from app.interface.denoiser import BaseDenoiser

logger = logging.getLogger(__name__)

# fixed-point refinement of the implicit inversion equation
INVERSION_MAX_ITERS = 100
INVERSION_TOL = 1e-13


def _coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Return (a, b) with z_{t-1} = a * z_t + b * eps for the deterministic update."""
    a = sched.signal(t - 1) / sched.signal(t)
    b = sched.noise(t - 1) - a * sched.noise(t)
    return a, b


def ddim_reverse_step(z_t: LatentGrid, out: DenoiserOutput, t: int, sched: NoiseSchedule) -> LatentGrid:
    """
    Deterministic (eta = 0) DDIM update from t to t-1.

    z_{t-1} = sqrt(ab_{t-1}) * x0 + sqrt(1 - ab_{t-1}) * eps, x0 = (z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)

    Args:
        z_t (LatentGrid): Latent at time t.
        out (DenoiserOutput): Denoiser output evaluated at z_t.
        t (int): Current time, 1 <= t <= T.
        sched (NoiseSchedule): Noise schedule.

    Raises:
        ShapeMismatchError: If the noise prediction and the latent disagree in shape.
        ValueError: If t is out of range.

    Returns:
        LatentGrid: Latent at time t-1.
    """
    if not 1 <= t <= sched.steps:
        msg = f"t={t} outside [1, {sched.steps}]"
        raise ValueError(msg)
    if out.eps.shape != z_t.data.shape:
        msg = f"eps shape {out.eps.shape} != latent shape {z_t.data.shape}"
        raise ShapeMismatchError(msg)

    x0 = (z_t.data - sched.noise(t) * out.eps) / sched.signal(t)
    data = sched.signal(t - 1) * x0 + sched.noise(t - 1) * out.eps
    return LatentGrid(data, t - 1)


def _invert_step(
    z_prev: FloatArray,
    t: int,
    denoiser: BaseDenoiser,
    sched: NoiseSchedule,
    tokens: list[int],
) -> FloatArray:
    a, b = _coefficients(t, sched)
    z_t = z_prev
    for _ in range(INVERSION_MAX_ITERS):
        eps = denoiser.denoise(LatentGrid(z_t, t), t, tokens).eps
        if eps.shape != z_prev.shape:
            msg = f"eps shape {eps.shape} != latent shape {z_prev.shape}"
            raise ShapeMismatchError(msg)
        nxt = (z_prev - b * eps) / a
        change = float(np.max(np.abs(nxt - z_t))) if nxt.size else 0.0
        z_t = nxt
        if change <= INVERSION_TOL * max(1.0, float(np.max(np.abs(nxt)))):
            break
    else:
        logger.debug("Inversion at t=%d stopped before reaching tolerance", t)
    return z_t


def ddim_inversion(
    z_0: LatentGrid,
    denoiser: BaseDenoiser,
    sched: NoiseSchedule,
    tokens: list[int],
) -> list[LatentGrid]:
    """
    Reconstruct the deterministic noising trajectory of a latent.

    Each step solves the reverse update for z_t given z_{t-1}, evaluating the denoiser at the current
    estimate of z_t until the estimate stops moving, so the inversion is exact for noise predictions that
    are constant or linear in the latent.

    Args:
        z_0 (LatentGrid): Clean latent.
        denoiser (BaseDenoiser): Denoiser evaluated along the trajectory.
        sched (NoiseSchedule): Noise schedule.
        tokens (list[int]): Prompt tokens passed to the denoiser.

    Raises:
        ValueError: If z_0 holds non-finite values.

    Returns:
        list[LatentGrid]: T+1 latents, element t being z_t (element 0 is a copy of z_0).
    """
    if not z_0.is_finite():
        raise ValueError("Cannot invert a latent with non-finite values")

    trajectory = [LatentGrid(z_0.data.copy(), 0)]
    for t in range(1, sched.steps + 1):
        trajectory.append(LatentGrid(_invert_step(trajectory[-1].data, t, denoiser, sched, tokens), t))
    return trajectory


def ddim_sample(z_t: LatentGrid, denoiser: BaseDenoiser, sched: NoiseSchedule, tokens: list[int]) -> LatentGrid:
    """Run plain reverse steps from z_t.step_index down to 0."""
    z = z_t
    for t in range(z_t.step_index, 0, -1):
        z = ddim_reverse_step(z, denoiser.denoise(z, t, tokens), t, sched)
    return z
