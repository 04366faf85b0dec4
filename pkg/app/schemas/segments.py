from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from app.schemas.labels import NUM_CLASSES

class SegmentPrediction(BaseModel):
  """One detected event: class id 0-16 over the inclusive frame interval [start, end]"""

  model_config = ConfigDict(frozen=True)

  class_id: int
  start: int
  end: int
  confidence: float = 1.0

  @field_validator("class_id")
  def validate_class(cls, v: int) -> int:
    if not 0 <= v < NUM_CLASSES:
      raise ValueError(f"class id {v} outside [0, {NUM_CLASSES})")
    return v

  @field_validator("confidence")
  def validate_confidence(cls, v: float) -> float:
    if not 0.0 <= v <= 1.0:
      raise ValueError(f"confidence {v} outside [0, 1]")
    return v

  @model_validator(mode="after")
  def validate_interval(self):
    if self.start < 0 or self.start > self.end:
      raise ValueError(f"invalid interval [{self.start}, {self.end}]")
    return self

  @property
  def length(self) -> int:
    return self.end - self.start + 1
