"""Configuration models, override handling and the shared console."""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from rich.console import Console

console = Console()

# Global debug flag, toggled by the CLI (--debug) or HYPERVOLTRAN_DEBUG=1
DEBUG_MODE = os.getenv("HYPERVOLTRAN_DEBUG", "") not in ("", "0")

OUTPUT_ROOT_ENV = "HYPERVOLTRAN_OUTPUT_ROOT"


def set_debug(enabled: bool) -> None:
    """Enable or disable debug output for every module."""
    global DEBUG_MODE
    DEBUG_MODE = enabled


def debug_print(*args, **kwargs):
    """Print debug information only if DEBUG_MODE is True."""
    if DEBUG_MODE:
        console.print(*args, style="dim", **kwargs)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class RigConfig(_Strict):
    """Spherical camera ring used to render the source views."""

    n_views: int = Field(8, ge=1)
    elevation_deg: float = Field(20.0, gt=-90.0, lt=90.0)
    azimuth_offset_deg: float = 0.0
    radius: float = 2.2
    img_size: int = Field(64, ge=8)
    focal_px: float = Field(56.0, gt=0.0)
    max_steps: int = Field(128, ge=1)
    hit_eps: float = Field(1e-4, gt=0.0)

    @field_validator("radius")
    @classmethod
    def _outside_bound(cls, value: float) -> float:
        if value <= 1.0:
            raise ValueError(f"camera radius must exceed the unit bounding sphere, got {value}")
        return value


class CorruptionSpec(_Strict):
    """Per-view degradations emulating inconsistently synthesized views.

    View 0 (the conditioning input) is never touched.
    """

    color_jitter_sigma: float = Field(0.0, ge=0.0)
    pose_jitter_deg: float = Field(0.0, ge=0.0)
    occluder_count: int = Field(0, ge=0)
    seed: int = 0

    @property
    def is_identity(self) -> bool:
        return self.color_jitter_sigma == 0 and self.pose_jitter_deg == 0 and self.occluder_count == 0


class DataConfig(_Strict):
    n_scenes: int = Field(1, ge=1)
    min_primitives: int = Field(1, ge=1)
    max_primitives: int = Field(3, ge=1)
    rig: RigConfig = Field(default_factory=RigConfig)
    corruption: CorruptionSpec = Field(default_factory=CorruptionSpec)

    @model_validator(mode="after")
    def _primitive_range(self):
        if self.max_primitives < self.min_primitives:
            raise ValueError("max_primitives must be >= min_primitives")
        return self


class ModelConfig(_Strict):
    """Sizes of every trainable sub-network."""

    feature_channels: int = Field(16, ge=1)
    feature_stride: Literal[1, 2, 4] = 4
    volume_channels: int = Field(16, ge=1)
    embedding_dim: int = Field(64, ge=1)
    hyper_hidden: int = Field(32, ge=1)
    sdf_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    geo_feat_dim: int = Field(8, ge=1)
    n_heads: int = Field(5, ge=1)
    n_layers: int = Field(2, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    grid_resolution: int = Field(32, ge=4)
    grid_bound: float = Field(1.0, gt=0.0)
    inv_std_init: float = Field(20.0, gt=0.0)
    init_radius: float = Field(0.5, gt=0.0)
    aggregator: Literal["voltran", "mean"] = "voltran"
    use_hypernetwork: bool = True

    @field_validator("sdf_hidden")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(width < 1 for width in value):
            raise ValueError(f"sdf_hidden widths must be >= 1, got {value}")
        return value

    @property
    def sdf_input_dim(self) -> int:
        return 3 + self.volume_channels + self.feature_channels + 3

    @property
    def token_dim(self) -> int:
        return 3 + self.feature_channels + self.volume_channels


class LossWeights(_Strict):
    """Weights of the auxiliary loss terms (the RGB term always has weight 1)."""

    eikonal: float = Field(0.1, ge=0.0)
    sparse: float = Field(0.02, ge=0.0)
    depth: float = Field(1.0, ge=0.0)
    tau: float = Field(10.0, ge=0.0)


class TrainConfig(_Strict):
    lr: float = Field(5e-4, gt=0.0)
    schedule: Literal["cosine", "constant"] = "cosine"
    iterations: int = Field(2000, ge=1)
    rays_per_batch: int = Field(512, ge=1)
    background_ratio: float = Field(0.3, ge=0.0, le=1.0)
    seed: int = 0
    samples_per_ray: int = Field(64, ge=2)
    n_source_views: int = Field(8, ge=1)
    eikonal_box_fraction: float = Field(0.5, ge=0.0, le=1.0)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    loss: LossWeights = Field(default_factory=LossWeights)


class EvalConfig(_Strict):
    fscore_threshold: float = Field(0.05, gt=0.0)
    iou_resolution: int = Field(64, ge=16)
    mesh_resolution: int = Field(64, ge=8)
    surface_samples: int = Field(10000, ge=1)
    icp_iterations: int = Field(30, ge=1)
    icp_with_scale: bool = True
    sample_seed: int = 0
    render_chunk: int = Field(2048, ge=1)


class RunConfig(_Strict):
    """Root configuration shared by every CLI command."""

    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``key.path=value`` overrides to a nested dict in place.

    Args:
        data: Nested configuration dictionary
        overrides: Strings of the form ``train.lr=1e-3``

    Returns:
        The updated dictionary
    """
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"Override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = [part for part in key.strip().split(".") if part]
        if not parts:
            raise ValueError(f"Empty override key in {item!r}")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"Unknown config section {part!r} in override {item!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"Unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def _merged(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merged(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(
    config_path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    base: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Build the run configuration: defaults (or ``base``) < file < --seed < --override."""
    data = RunConfig.model_validate(base).model_dump() if base is not None else RunConfig().model_dump()
    if config_path is not None:
        try:
            with open(config_path, "r") as f:
                file_data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"Could not read config file {config_path}: {e}") from e
        if not isinstance(file_data, dict):
            raise ValueError(f"Config file {config_path} must hold a JSON object")
        data = RunConfig.model_validate(_merged(data, file_data)).model_dump()
    if seed is not None:
        data["seed"] = seed
        data["train"]["seed"] = seed
        data["data"]["corruption"]["seed"] = seed
    apply_overrides(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ValueError(f"Invalid configuration: {e}") from e


def default_output_root() -> Path:
    """Output root from the environment (.env honoured), else ./runs."""
    load_dotenv()
    return Path(os.getenv(OUTPUT_ROOT_ENV) or "runs")
