from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]


@dataclass
class LatentGrid:
    """
    A latent code z_t.

    Attributes:
        data (FloatArray): C x H x W float64 values.
        step_index (int): Diffusion time t the latent belongs to.
    """

    data: FloatArray
    step_index: int = 0

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:  # noqa: PLR2004
            raise ValueError("A latent must be C x H x W")

    @property
    def shape(self) -> tuple[int, int, int]:
        """(C, H, W)."""
        c, h, w = self.data.shape
        return c, h, w

    def is_finite(self) -> bool:
        """Whether every value is finite."""
        return bool(np.isfinite(self.data).all())

    def with_data(self, data: FloatArray, step_index: int | None = None) -> LatentGrid:
        """Copy with new values, keeping the step index unless given."""
        return LatentGrid(data, self.step_index if step_index is None else step_index)

    @classmethod
    def zeros(cls, shape: tuple[int, int, int], step_index: int = 0) -> LatentGrid:
        """All-zero latent."""
        return cls(np.zeros(shape, dtype=np.float64), step_index)

    @classmethod
    def random(cls, shape: tuple[int, int, int], seed: int | list[int], step_index: int = 0) -> LatentGrid:
        """Standard normal latent drawn from `numpy.random.default_rng(seed)`."""
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal(shape), step_index)


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Cumulative signal rates of a diffusion schedule.

    Attributes:
        alpha_bar (FloatArray): T+1 values, alpha_bar[0] = 1, strictly decreasing, all positive.
    """

    alpha_bar: FloatArray

    def __post_init__(self) -> None:
        ab = self.alpha_bar
        if ab.ndim != 1 or len(ab) < 2:  # noqa: PLR2004
            raise ValueError("alpha_bar must hold at least two values")
        if ab[0] != 1.0 or ab[-1] <= 0.0 or not bool(np.all(np.diff(ab) < 0)):
            raise ValueError("alpha_bar must start at 1 and decrease strictly to a positive value")

    @property
    def steps(self) -> int:
        """Total number of steps T."""
        return len(self.alpha_bar) - 1

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar_t)."""
        return float(np.sqrt(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t)."""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


@dataclass
class AttentionStack:
    """
    Per-token cross-attention planes.

    Maps are exchanged as pre-softmax logits; consumers apply the spatial softmax.

    Attributes:
        maps (dict[int, FloatArray]): token id -> H' x W' logits.
    """

    maps: dict[int, FloatArray] = field(default_factory=dict)

    def __getitem__(self, token: int) -> FloatArray:
        return self.maps[token]

    def __contains__(self, token: object) -> bool:
        return token in self.maps

    @property
    def tokens(self) -> list[int]:
        """Token ids covered by the stack."""
        return list(self.maps)

    def probabilities(self, token: int) -> FloatArray:
        """Spatial softmax of the token's logits."""
        return spatial_softmax(self.maps[token])


def spatial_softmax(logits: FloatArray) -> FloatArray:
    """Softmax over every cell of a 2-D map."""
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


@dataclass
class DenoiserOutput:
    """Noise prediction and cross-attention of one denoiser evaluation."""

    eps: FloatArray
    attention: AttentionStack
