"""
Run configuration.

One JSON document configures a training run. Missing keys take the
desk-scale defaults below; unknown keys are rejected so a typo never goes
unnoticed.
"""

import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, TypeVar, Union

from .errors import InvalidInputError, InvalidParameterError
from .losses import LossWeights
from .priors import CorruptionConfig, RefinementSchedule
from .shadow import (BASE_SHARPNESS, BIAS_FRACTION, MAX_SHARPNESS_FACTOR, NORMAL_OFFSET_FRACTION,
                     SAMPLING_MODES, SLOPE_BIAS_FRACTION, WARMUP_INTERVAL, DgsmConfig)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
T = TypeVar("T")


@dataclass
class DgsmSettings:
    """Scene-relative shadow test parameters and the sharpness warm-up."""

    base_sharpness: float = BASE_SHARPNESS
    bias_fraction: float = BIAS_FRACTION
    normal_offset_fraction: float = NORMAL_OFFSET_FRACTION
    slope_bias_fraction: float = SLOPE_BIAS_FRACTION
    interval: int = WARMUP_INTERVAL
    max_factor: float = MAX_SHARPNESS_FACTOR
    sampling: str = "bilinear"
    warmup: bool = True
    shadow_resolution: int = 128

    def __post_init__(self) -> None:
        if self.sampling not in SAMPLING_MODES:
            raise InvalidParameterError(f"unknown shadow-map sampling: {self.sampling}")
        if self.shadow_resolution < 1 or self.interval < 1:
            raise InvalidParameterError("shadow resolution and warm-up interval must be positive")

    def at(self, diagonal: float, step: Optional[int] = None) -> DgsmConfig:
        """Configuration for a scene diagonal at an optimizer step."""
        return DgsmConfig.for_scene(
            diagonal, step if self.warmup else None, base_sharpness=self.base_sharpness,
            bias_fraction=self.bias_fraction,
            normal_offset_fraction=self.normal_offset_fraction,
            slope_bias_fraction=self.slope_bias_fraction, interval=self.interval,
            max_factor=self.max_factor, sampling=self.sampling)


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-5
    interval: int = 500
    stop: int = 10000
    split_fraction: float = 0.01
    min_opacity: float = 0.005
    max_screen_fraction: float = 0.2
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.grad_threshold <= 0 or self.interval <= 0:
            raise InvalidParameterError("densify threshold and interval must be positive")


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final_factor: float = 0.01
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    base_color: float = 2.5e-3
    material: float = 5e-3
    sun_intensity: float = 1e-2
    environment: float = 1e-2
    predictor: float = 1e-3

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidParameterError(f"learning rate {name} must be non-negative")


@dataclass
class ProviderConfig:
    """Material prior provider and its error model."""

    kind: str = "synthetic"
    bias: float = 0.0
    blur_radius: float = 4.0
    noise: float = 0.0
    seed: int = 0

    def corruption(self) -> CorruptionConfig:
        return CorruptionConfig(bias=self.bias, blur_radius=self.blur_radius,
                                noise=self.noise, seed=self.seed)


@dataclass
class NovelViewConfig:
    enabled: bool = True
    interval: int = 2000
    oracle: str = "ground_truth"

    def __post_init__(self) -> None:
        if self.oracle not in ("ground_truth", "identity"):
            raise InvalidParameterError(f"unknown inpaint oracle: {self.oracle}")


@dataclass
class AerialConfig:
    count: int = 8
    resolution: int = 16


@dataclass
class TrainConfig:
    """
    Everything a two-stage training run needs.

    ``frozen`` names optimizer groups kept fixed in stage 2 (for example
    ``["positions", "rotations", "scales", "opacities", "sun_intensity"]``).
    ``visibility`` selects which visibility the stage-2 shaded image uses.
    """

    stage1_steps: int = 3000
    stage2_steps: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    refinement: RefinementSchedule = field(default_factory=RefinementSchedule)
    dgsm: DgsmSettings = field(default_factory=DgsmSettings)
    lr: LearningRates = field(default_factory=LearningRates)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    novel: NovelViewConfig = field(default_factory=NovelViewConfig)
    aerial: AerialConfig = field(default_factory=AerialConfig)
    frozen: List[str] = field(default_factory=list)
    visibility: str = "fixed"
    predictor: str = "local_linear"
    predictor_kernel: int = 1
    freeze_positions_after: int = 10000
    checkpoint_interval: int = 500
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise InvalidParameterError("step counts must be non-negative")
        if self.visibility not in ("fixed", "editable", "raytraced"):
            raise InvalidParameterError(f"unknown visibility mode: {self.visibility}")
        if self.threads < 1:
            raise InvalidParameterError("threads must be at least 1")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """The published schedule: 30k + 20k steps, refresh every 6000."""
        return cls(stage1_steps=30000, stage2_steps=20000,
                   refinement=RefinementSchedule(cycles=3, period=6000, noise_step=600))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["version"] = CONFIG_VERSION
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        """
        Build from a parsed document.

        Raises:
            InvalidInputError: On unknown keys or values of the wrong type.
        """
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise InvalidInputError(f"unsupported config version {version}")
        return _build(cls, data, "config")

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


_NESTED: Dict[str, Type[Any]] = {
    "weights": LossWeights,
    "densify": DensifyConfig,
    "refinement": RefinementSchedule,
    "dgsm": DgsmSettings,
    "lr": LearningRates,
    "provider": ProviderConfig,
    "novel": NovelViewConfig,
    "aerial": AerialConfig,
}


def _build(cls: Type[T], data: Mapping[str, Any], where: str) -> T:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        nested = _NESTED.get(key) if cls is TrainConfig else None
        if nested is not None:
            if not isinstance(value, Mapping):
                raise InvalidInputError(f"{where}.{key} must be an object")
            value = _build(nested, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise InvalidInputError(f"invalid {where}: {e}")


def load_config(path: Optional[Union[str, Path]]) -> TrainConfig:
    """
    Read a JSON run configuration; ``None`` gives the defaults.

    Raises:
        InvalidInputError: If the file is missing or malformed.
    """
    if path is None:
        return TrainConfig()
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise InvalidInputError(f"config {path} must hold a JSON object")
    logger.debug(f"Loaded config {path}")
    return TrainConfig.from_dict(data)
