import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.exceptions import ConfigError

logger = logging.getLogger(__name__)


class PipelineConfig(BaseSettings):
    """
    Every tunable knob of the reconstruction pipeline.

    Defaults reproduce the published weights. Values are resolved from, in
    increasing precedence: field defaults, `RC_*` environment variables, a
    `key=value` config file and explicit overrides (command-line flags).
    """
    # --- Stage 1 energy weights ---
    w_l: float = Field(10.0, ge=0, description="Landmark term weight")
    w_r: float = Field(5e-5, ge=0, description="PCA coefficient regularizer weight")
    w_con: float = Field(1.0, ge=0, description="Photo-consistency term weight (0 disables it)")

    # --- Stage 2 energy weights ---
    lambda_s: float = Field(0.1, ge=0, description="Specular difference term weight")
    lambda_h: float = Field(0.001, ge=0, description="Laplacian smoothness term weight")

    # --- Stage 3 energy weights ---
    w_1: float = Field(1e-3, ge=0, description="Normal-correction Laplacian weight")
    w_2: float = Field(0.3, ge=0, description="Normal-correction magnitude weight")

    # --- Shading ---
    shininess: float = Field(5.0, gt=0, description="Blinn-Phong shininess exponent m")
    intensity_epsilon: float = Field(0.1, gt=0, description="Denominator guard of the dominant-light intensity")
    smooth_l1_epsilon: float = Field(1e-3, gt=0, description="Epsilon of the smoothed L1 surrogate")

    # --- Stage 1 solver ---
    gn_max_iters: int = Field(30, ge=1, description="Gauss-Newton iterations per fitting stage")
    gn_damping: float = Field(1e-3, gt=0, description="Initial Levenberg-Marquardt damping")
    gn_tol: float = Field(1e-8, ge=0, description="Relative cost decrease that stops Gauss-Newton")
    landmark_penalty: float = Field(1e6, gt=0, description="Energy charged for a landmark behind the camera")

    # --- Stage 2 solver ---
    adam_steps_per_block: int = Field(2000, ge=1, description="Adam steps per block per pass")
    block_passes: int = Field(5, ge=1, description="Block-coordinate passes")
    pass_tol: float = Field(1e-4, ge=0, description="Relative energy decrease per pass that stops Stage 2")
    adam_lr_lighting: float = Field(0.01, gt=0, description="Adam learning rate for SH and ambient")
    adam_lr_maps: float = Field(0.5, gt=0, description="Adam learning rate for the albedo maps (8-bit units)")

    # --- Stage 3 solver ---
    refine_iters: int = Field(100, ge=1, description="Adam iterations of normal refinement")
    adam_lr_normals: float = Field(0.01, gt=0, description="Adam learning rate for normal offsets (radians)")
    vertex_tikhonov: float = Field(0.1, ge=0, description="Tikhonov weight anchoring vertex offsets to zero")

    # --- Adam ---
    adam_beta1: float = Field(0.9, ge=0, lt=1, description="First-moment decay")
    adam_beta2: float = Field(0.999, ge=0, lt=1, description="Second-moment decay")
    adam_eps: float = Field(1e-8, gt=0, description="Adam denominator epsilon")
    adam_patience: int = Field(50, ge=1, description="Steps without improvement before the learning rate halves")

    # --- Resolution ---
    uv_resolution: int = Field(512, ge=3, description="Side length of every UV raster")
    image_width: int = Field(192, ge=8, description="Synthetic image width in pixels")
    image_height: int = Field(192, ge=8, description="Synthetic image height in pixels")

    # --- Synthetic harness ---
    seed: int = Field(0, ge=0, description="Root seed of every named random stream")
    model_vertices: int = Field(642, ge=4, description="Vertex count of the synthetic model")
    k_id: int = Field(8, ge=1, description="Identity basis width")
    k_exp: int = Field(4, ge=1, description="Expression basis width")
    k_alb: int = Field(8, ge=1, description="Albedo basis width")
    rig_yaw_deg: float = Field(20.0, ge=0, lt=90, description="Yaw of each input camera off the rig axis")
    heldout_yaw_offset_deg: float = Field(0.0, description="Held-out camera yaw relative to the rig midpoint")
    yaw_sweep_deg: float = Field(25.0, ge=0, lt=90, description="Half-width of the head yaw arc over frames")

    # --- Runtime ---
    threads: int = Field(1, ge=1, description="Upper bound on worker threads")

    model_config = SettingsConfigDict(
        env_prefix="RC_",
        case_sensitive=False,
        extra="forbid",
    )


def _check_keys(values: Mapping[str, Any], origin: str) -> None:
    known = set(PipelineConfig.model_fields)
    for key in values:
        if key.lower() not in known:
            raise ConfigError(f"Unknown configuration key '{key}' in {origin}")


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """
    Builds a PipelineConfig from an optional config file and flag overrides.

    Overrides whose value is None are ignored so argparse namespaces can be
    passed straight through.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        _check_keys(file_values, str(path))
        values.update({k.lower(): v for k, v in file_values.items()})
        logger.info(f"Loaded {len(file_values)} configuration keys from {path}")
    if overrides:
        given = {k: v for k, v in overrides.items() if v is not None}
        _check_keys(given, "overrides")
        values.update({k.lower(): v for k, v in given.items()})
    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e


def write_config(config: PipelineConfig, path: Union[str, Path]) -> None:
    """Writes a config file that `load_config` reads back to an equal config."""
    lines = [f"{name}={getattr(config, name)!r}" for name in PipelineConfig.model_fields]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# Default instance used when callers pass no explicit config.
try:
    settings = PipelineConfig()
except ValidationError as e:
    logger.error(f"Could not load pipeline settings from the environment: {e}")
    raise SystemExit("Configuration validation failed.") from e


def get_settings() -> PipelineConfig:
    return settings


if __name__ == "__main__":
    print("--- Pipeline Settings ---")
    for name in PipelineConfig.model_fields:
        print(f"{name}: {getattr(settings, name)}")
