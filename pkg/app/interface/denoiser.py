from abc import ABC, abstractmethod

from app.entity.latent import DenoiserOutput, FloatArray, LatentGrid


class BaseDenoiser(ABC):
    """
    Base denoiser class: (z_t, t, tokens) -> (noise prediction, attention logits).

    Attributes:
        attention_shape (tuple[int, int]): Resolution of the emitted attention planes.
    """

    attention_shape: tuple[int, int]

    @abstractmethod
    def denoise(self, z: LatentGrid, t: int, tokens: list[int]) -> DenoiserOutput:
        """Predict noise and cross-attention logits for every token. Abstract method."""
        raise NotImplementedError

    @abstractmethod
    def attention_vjp(self, z: LatentGrid, t: int, tokens: list[int], grad: dict[int, FloatArray]) -> FloatArray:
        """
        Vector-Jacobian product of the attention logits with respect to the latent. Abstract method.

        Returns the gradient over z of sum_k <grad[k], A_k(z)>.
        """
        raise NotImplementedError

    def prompt_directions(self, tokens: list[int]) -> FloatArray | None:  # noqa: ARG002
        """
        Latent channel vectors, one row per token, that raise that token's attention logit by one.

        Denoisers that condition on the tokens inside `denoise` return None and get no prompt prior.
        """
        return None

    def close(self) -> None:  # noqa: B027
        """Release resources held by the denoiser."""
