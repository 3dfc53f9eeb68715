from collections.abc import Iterator
from contextlib import contextmanager

from app.core.config import RunConfig
from app.interface.denoiser import BaseDenoiser

from .external import ExternalDenoiser
from .reference import ReferenceDenoiser


@contextmanager
def open_denoiser(config: RunConfig) -> Iterator[BaseDenoiser]:
    """
    Provide the denoiser a run config asks for and release it afterwards.

    The reference denoiser is used unless `denoiser_cmd` is set, in which case the command is started as an
    external backend for the duration of the block.
    """
    denoiser: BaseDenoiser
    if config.denoiser_cmd:
        denoiser = ExternalDenoiser(
            config.denoiser_cmd,
            (config.channels, config.height, config.width),
            timeout=config.denoiser_timeout,
        )
    else:
        denoiser = ReferenceDenoiser(
            config.channels,
            config.height,
            config.width,
            seed=config.attention_seed,
            eps_scale=config.eps_scale,
        )
    try:
        if isinstance(denoiser, ExternalDenoiser):
            denoiser.open()
        yield denoiser
    finally:
        denoiser.close()
