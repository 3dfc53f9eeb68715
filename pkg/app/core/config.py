from pathlib import Path
from typing import Any, Self

from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError


class CommonSettings(BaseSettings):
    """
    Common configuration settings for the application.

    Attributes:
        debug (bool): A flag indicating whether debug mode is enabled.
            Defaults to `False`. Mapped from the `SRF_DEBUG` environment variable.
        log_file (str | None): Optional path of a rotating log file.
            Mapped from the `SRF_LOG_FILE` environment variable.
    """

    debug: bool = Field(alias="SRF_DEBUG", default=False)
    log_file: str | None = Field(alias="SRF_LOG_FILE", default=None)


common_settings = CommonSettings()


class RunConfig(BaseSettings):
    """
    Every tunable of a progressive run.

    Values come from defaults, then `SRF_`-prefixed environment variables, then a flat
    `key = value` config file, then command-line flags.

    Attributes:
        steps (int): Total diffusion steps T.
        channels (int): Latent channel count C.
        height (int): Latent and attention grid height.
        width (int): Latent and attention grid width.
        beta_start (float): First beta of the linear schedule.
        beta_end (float): Last beta of the linear schedule.
        eps_scale (float): Slope of the reference denoiser's noise prediction.
        delta (float): Stimulus weight applied to the target mask.
        alpha (float): Response step size.
        stimulus_steps (int): Number of initial reverse steps with the stimulus applied.
        inner_iters (int): Gradient iterations per stimulated step.
        tau (int): Reverse step after which fusion switches to the attention mask.
        attn_quantile (float): Threshold quantile used to build attention masks.
        prompt_strength (float): Logit boost the prompt prior gives an inserted entity inside its region.
        seed (int): Seed of every pseudo-random draw of a run.
        attention_seed (int): Seed of the reference denoiser's per-token projections.
        denoiser_cmd (str | None): Command line of an external denoiser; reference denoiser when unset.
        denoiser_timeout (float): Seconds to wait for an external denoiser answer.
        proximity_ratio (float): Interaction radius as a fraction of the canvas diagonal.
        wearing_iou (float): Minimum IoU between the boxes of a "wearing" pair.
        default_box_ratio (float): Side of a new box as a fraction of its reference side.
        min_box_area (float): Minimum normalized box area.
        recall_threshold (float): Attention mass inside the mask for an object to count as synthesized.
        distortion_ratio (float): Max-abs ratio to the background above which a run is degraded.
    """

    steps: int = Field(default=50, ge=1)
    channels: int = Field(default=4, ge=1)
    height: int = Field(default=16, ge=1)
    width: int = Field(default=16, ge=1)
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=0.02, gt=0.0, lt=1.0)
    eps_scale: float = 0.1

    delta: float = Field(default=0.8, gt=0.0, le=1.0)
    alpha: float = Field(default=40.0, ge=0.0)
    stimulus_steps: int = Field(default=25, ge=0)
    inner_iters: int = Field(default=1, ge=1)

    tau: int = Field(default=40, ge=0)
    attn_quantile: float = Field(default=0.75, gt=0.0, lt=1.0)
    prompt_strength: float = Field(default=4.0, ge=0.0)

    seed: int = 0
    attention_seed: int = 7
    denoiser_cmd: str | None = None
    denoiser_timeout: float = Field(default=120.0, gt=0.0)

    proximity_ratio: float = Field(default=0.25, gt=0.0)
    wearing_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    default_box_ratio: float = Field(default=0.3, gt=0.0, le=1.0)
    min_box_area: float = Field(default=0.01, gt=0.0, le=1.0)

    recall_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    distortion_ratio: float = Field(default=8.0, gt=0.0)

    model_config = SettingsConfigDict(env_prefix="SRF_", extra="forbid")

    @model_validator(mode="after")
    def check_against_steps(self) -> Self:
        """Validate the fields constrained by the total step count."""
        if self.stimulus_steps > self.steps:
            msg = f"stimulus_steps ({self.stimulus_steps}) must not exceed steps ({self.steps})"
            raise ValueError(msg)
        if self.tau > self.steps:
            msg = f"tau ({self.tau}) must not exceed steps ({self.steps})"
            raise ValueError(msg)
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must not be smaller than beta_start")
        return self

    @classmethod
    def build(cls, **values: Any) -> "RunConfig":  # noqa: ANN401
        """
        Create a config, turning validation failures into a ConfigError.

        Raises:
            ConfigError: If a value violates its constraint or a key is unknown.

        Returns:
            RunConfig: The validated config.
        """
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: Path, **overrides: Any) -> "RunConfig":  # noqa: ANN401
        """
        Read a flat `key = value` config file.

        Args:
            path (Path): Config file path. Lines starting with `#` are comments.
            **overrides: Values that take precedence over the file (command-line flags).

        Raises:
            ConfigError: If the file cannot be read, a line is malformed or a value is invalid.

        Returns:
            RunConfig: The validated config.
        """
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            msg = f"Cannot read config file '{path}'"
            raise ConfigError(msg) from exc

        values: dict[str, Any] = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                msg = f"line {line_no}: expected 'key = value'"
                raise ConfigError(msg)
            value = value.strip()
            values[key.strip()] = None if value in ("", "none") else value

        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.build(**values)

    def dump(self) -> str:
        """Render the resolved config in the flat `key = value` format."""
        lines = []
        for key, value in self.model_dump().items():
            rendered = "none" if value is None else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"
