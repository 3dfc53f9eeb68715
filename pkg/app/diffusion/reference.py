import numpy as np

from app.core.exceptions import ShapeMismatchError
from app.entity.latent import AttentionStack, DenoiserOutput, FloatArray, LatentGrid
from app.interface.denoiser import BaseDenoiser


class ReferenceDenoiser(BaseDenoiser):
    """
    Analytic linear denoiser.

    eps = eps_scale * z, and the attention logits of token k at each cell are the dot product of a
    per-token projection W_k (length C) with the latent's channel vector at that cell. W_k is drawn from
    `numpy.random.default_rng([seed, k])` scaled by 1/sqrt(C), so outputs are bitwise reproducible.
    The attention grid equals the latent's spatial grid.
    """

    def __init__(
        self,
        channels: int = 4,
        height: int = 16,
        width: int = 16,
        seed: int = 7,
        eps_scale: float = 0.1,
    ) -> None:
        """
        Initialize ReferenceDenoiser.

        Args:
            channels (int): Latent channel count C.
            height (int): Latent and attention height.
            width (int): Latent and attention width.
            seed (int): Seed of the per-token projections.
            eps_scale (float): Slope of the noise prediction.
        """
        self.channels = channels
        self.attention_shape = (height, width)
        self.seed = seed
        self.eps_scale = eps_scale
        self._projections: dict[int, FloatArray] = {}

    def projection(self, token: int) -> FloatArray:
        """Projection vector W_k of a token."""
        if token < 0:
            msg = f"Token ids must be non-negative, got {token}"
            raise ValueError(msg)
        if token not in self._projections:
            rng = np.random.default_rng([self.seed, token])
            self._projections[token] = rng.standard_normal(self.channels) / np.sqrt(self.channels)
        return self._projections[token]

    def _check(self, z: LatentGrid) -> None:
        if z.shape != (self.channels, *self.attention_shape):
            msg = f"Latent shape {z.shape} != {(self.channels, *self.attention_shape)}"
            raise ShapeMismatchError(msg)

    def denoise(self, z: LatentGrid, t: int, tokens: list[int]) -> DenoiserOutput:  # noqa: ARG002
        """Noise prediction and attention logits of a latent."""
        self._check(z)
        maps = {k: np.tensordot(self.projection(k), z.data, axes=1) for k in tokens}
        return DenoiserOutput(eps=self.eps_scale * z.data, attention=AttentionStack(maps))

    def attention_vjp(
        self,
        z: LatentGrid,
        t: int,  # noqa: ARG002
        tokens: list[int],
        grad: dict[int, FloatArray],
    ) -> FloatArray:
        """Closed-form gradient: sum over tokens of W_k (outer) grad_k."""
        self._check(z)
        out = np.zeros_like(z.data)
        for k in tokens:
            if k in grad:
                out += np.multiply.outer(self.projection(k), grad[k])
        return out

    def prompt_directions(self, tokens: list[int]) -> FloatArray:
        """
        Rows of the pseudo-inverse of the stacked projections.

        Row i raises the logit of token i by one and leaves the other listed tokens unchanged whenever the
        projections are linearly independent (least squares otherwise).
        """
        projections = np.stack([self.projection(k) for k in tokens])
        return np.linalg.pinv(projections).T
