import numpy as np

from app.entity.latent import NoiseSchedule


def linear_schedule(steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """
    Build a schedule from linearly spaced betas.

    Args:
        steps (int): Total number of steps T.
        beta_start (float): Beta of the first step.
        beta_end (float): Beta of the last step.

    Returns:
        NoiseSchedule: alpha_bar of length T+1 with alpha_bar[0] = 1.
    """
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    return NoiseSchedule(alpha_bar)
