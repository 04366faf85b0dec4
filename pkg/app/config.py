import json
import logging
from pathlib import Path
from functools import lru_cache
from typing import Any, Dict, List, Optional
from pydantic import BaseModel, Field, ValidationError, ValidationInfo, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigError, LabelError
from app.schemas.labels import ANATOMY_CLASSES, PATHOLOGY_CLASSES, anatomy_index, pathology_index

logger = logging.getLogger(__name__)

def _known_class(lookup, name: str) -> None:
  try:
    lookup(name)
  except LabelError as e:
    raise ValueError(str(e)) from None

class ModelDims(BaseModel):
  d: int = 512
  cls_dim: int = 1024
  patch_dim: int = 1024
  heads: int = 8
  attn_radius: int = 16
  gcn_k: int = 8
  gcn_radius: int = 5
  state_size: int = 16
  gps_hidden: int = 64
  cond_hidden: int = 64
  attn_layers: int = 2

  @field_validator("d", "cls_dim", "patch_dim", "heads", "attn_radius", "gcn_k", "state_size", "gps_hidden", "cond_hidden", "attn_layers")
  def validate_positive(cls, v: int, info: ValidationInfo) -> int:
    if v < 1:
      raise ValueError(f"{info.field_name} must be >= 1")
    return v

  @field_validator("gcn_radius")
  def validate_radius(cls, v: int, info: ValidationInfo) -> int:
    if v < 0:
      raise ValueError(f"{info.field_name} must be >= 0")
    return v

  @model_validator(mode="after")
  def validate_heads(self):
    if self.d % self.heads:
      raise ValueError(f"heads={self.heads} must divide d={self.d}")
    return self

class WindowConfig(BaseModel):
  window: int = 512
  stride: int = 256

  @model_validator(mode="after")
  def validate_geometry(self):
    if self.window < 1 or self.stride < 1:
      raise ValueError("window and stride must be >= 1")
    if self.stride > self.window:
      raise ValueError(f"stride={self.stride} larger than window={self.window} leaves frames uncovered")
    return self

class SynthConfig(BaseModel):
  frames: int = 5000
  seed: int = 0
  concentration: float = 5.0
  burst_rate: float = 2.0
  burst_min: int = 20
  burst_max: int = 120
  noise_sigma: float = 0.1
  lesion_magnitude: float = 5.0
  cls_dim: int = 1024
  patch_dim: int = 1024

  @field_validator("frames")
  def validate_frames(cls, v: int) -> int:
    if v < len(ANATOMY_CLASSES):
      raise ValueError(f"frames={v} cannot give each of the {len(ANATOMY_CLASSES)} organs a frame")
    return v

  @field_validator("concentration")
  def validate_concentration(cls, v: float) -> float:
    if v <= 0:
      raise ValueError("concentration must be positive")
    return v

  @field_validator("burst_rate", "noise_sigma", "lesion_magnitude")
  def validate_non_negative(cls, v: float, info: ValidationInfo) -> float:
    if v < 0:
      raise ValueError(f"{info.field_name} must be >= 0")
    return v

  @model_validator(mode="after")
  def validate_bursts(self):
    if self.burst_min < 1 or self.burst_min > self.burst_max:
      raise ValueError(f"burst length range [{self.burst_min}, {self.burst_max}] is invalid")
    return self

class ViterbiConfig(BaseModel):
  skip_penalty: float = 5.0
  emission_floor: float = 1e-6

  @field_validator("skip_penalty")
  def validate_penalty(cls, v: float) -> float:
    if v < 0:
      raise ValueError("skip_penalty must be >= 0")
    return v

  @field_validator("emission_floor")
  def validate_floor(cls, v: float) -> float:
    if v <= 0:
      raise ValueError("emission_floor must be > 0")
    return v

class LossConfig(BaseModel):
  gamma_pos: float = 0.0
  gamma_neg: float = 4.0
  clip: float = 0.05
  anatomy_boosts: Dict[str, float] = Field(default_factory=lambda: {
    "pylorus": 4.0, "z-line": 4.0, "ileocecal valve": 4.0, "esophagus": 4.0,
  })
  pathology_weights: Dict[str, float] = Field(default_factory=lambda: {
    "erosion": 3.0, "blood": 3.0, "angiectasia": 3.0,
  })
  boundary_boost: float = 1.0
  boundary_radius: int = 3
  mono_weight: float = 0.1

  @field_validator("gamma_pos", "gamma_neg", "boundary_boost", "mono_weight")
  def validate_non_negative(cls, v: float, info: ValidationInfo) -> float:
    if v < 0:
      raise ValueError(f"{info.field_name} must be >= 0")
    return v

  @field_validator("clip")
  def validate_clip(cls, v: float) -> float:
    if not 0 <= v < 1:
      raise ValueError("clip margin must lie in [0, 1)")
    return v

  @field_validator("boundary_radius")
  def validate_radius(cls, v: int) -> int:
    if v < 0:
      raise ValueError("boundary_radius must be >= 0")
    return v

  @field_validator("anatomy_boosts")
  def validate_anatomy_boosts(cls, v: Dict[str, float]) -> Dict[str, float]:
    for name, weight in v.items():
      _known_class(anatomy_index, name)
      if weight <= 0:
        raise ValueError(f"boost for {name} must be > 0")
    return v

  @field_validator("pathology_weights")
  def validate_pathology_weights(cls, v: Dict[str, float]) -> Dict[str, float]:
    for name, weight in v.items():
      _known_class(pathology_index, name)
      if weight <= 0:
        raise ValueError(f"weight for {name} must be > 0")
    return v

  def anatomy_boost_vector(self) -> List[float]:
    return [self.anatomy_boosts.get(name, 1.0) for name in ANATOMY_CLASSES]

  def pathology_weight_vector(self) -> List[float]:
    return [self.pathology_weights.get(name, 1.0) for name in PATHOLOGY_CLASSES]

class SamplerConfig(BaseModel):
  rare_classes: List[str] = Field(default_factory=lambda: ["angiectasia", "blood", "erosion"])
  oversample: float = 4.0

  @field_validator("rare_classes")
  def validate_rare(cls, v: List[str]) -> List[str]:
    for name in v:
      _known_class(pathology_index, name)
    return v

  @field_validator("oversample")
  def validate_oversample(cls, v: float) -> float:
    if v < 1:
      raise ValueError("oversample factor must be >= 1")
    return v

  def rare_indices(self) -> List[int]:
    return sorted(pathology_index(name) for name in self.rare_classes)

class PostprocessConfig(BaseModel):
  median_kernel: int = 5
  gate_min_count: int = 1
  threshold: float = 0.5
  min_len: int = 20
  max_gap: int = 20

  @field_validator("median_kernel")
  def validate_kernel(cls, v: int) -> int:
    if v < 1 or v % 2 == 0:
      raise ValueError("median_kernel must be a positive odd number")
    return v

  @field_validator("threshold")
  def validate_threshold(cls, v: float) -> float:
    if not 0 < v < 1:
      raise ValueError("segment threshold must lie in (0, 1)")
    return v

  @field_validator("min_len")
  def validate_min_len(cls, v: int) -> int:
    if v < 1:
      raise ValueError("min_len must be >= 1")
    return v

  @field_validator("max_gap", "gate_min_count")
  def validate_non_negative(cls, v: int, info: ValidationInfo) -> int:
    if v < 0:
      raise ValueError(f"{info.field_name} must be >= 0")
    return v

class RunConfig(BaseSettings):
  # General
  project_name: str = "GALAR TemporalNet v2"
  environment: str = "development"
  log_level: str = "INFO"
  seed: int = 0

  model: ModelDims = Field(default_factory=ModelDims)
  windows: WindowConfig = Field(default_factory=WindowConfig)
  synth: SynthConfig = Field(default_factory=SynthConfig)
  viterbi: ViterbiConfig = Field(default_factory=ViterbiConfig)
  loss: LossConfig = Field(default_factory=LossConfig)
  sampler: SamplerConfig = Field(default_factory=SamplerConfig)
  postprocess: PostprocessConfig = Field(default_factory=PostprocessConfig)

  # Evaluation
  thresholds: List[float] = Field(default_factory=lambda: [0.5, 0.95])

  @field_validator("thresholds")
  def validate_thresholds(cls, v: List[float]) -> List[float]:
    if not v:
      raise ValueError("at least one IoU threshold is required")
    for thr in v:
      if not 0 < thr <= 1:
        raise ValueError(f"IoU threshold {thr} outside (0, 1]")
    return v

  model_config = SettingsConfigDict(
    env_prefix="GTN_",
    env_nested_delimiter="__",
    env_file=".env",
    env_file_encoding="utf-8",
    case_sensitive=False,
    extra="ignore"
  )

def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
  merged = dict(base)
  for key, value in overrides.items():
    if isinstance(value, dict) and isinstance(merged.get(key), dict):
      merged[key] = _deep_merge(merged[key], value)
    else:
      merged[key] = value
  return merged

def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
  """Resolve a run configuration: flags override the JSON document, which overrides the environment"""

  data: Dict[str, Any] = {}
  if path:
    config_path = Path(path)
    if not config_path.exists():
      raise ConfigError(f"config file {config_path} does not exist")
    try:
      data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
      raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
    logger.info(f"Loaded run config from {config_path}")

  if overrides:
    data = _deep_merge(data, overrides)

  try:
    return RunConfig(**data)
  except ValidationError as e:
    first = e.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    raise ConfigError(f"{location}: {first['msg']}") from e

@lru_cache()
def get_config() -> RunConfig:
  return load_config()
