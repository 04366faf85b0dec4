from typing import Dict, List, Optional
from pydantic import BaseModel, Field, model_validator

def threshold_key(threshold: float) -> str:
  return f"{threshold:g}"

class ClassAP(BaseModel):
  class_id: int
  class_name: str
  gt_segments: int
  predictions: int
  # None when the class has neither ground truth nor predictions
  ap: Dict[str, Optional[float]]

class VideoReport(BaseModel):
  video_id: str
  map: Dict[str, float]
  per_class: List[ClassAP] = Field(default_factory=list)
  frame_map: Optional[float] = None

class EvalReport(BaseModel):
  thresholds: List[float]
  videos: List[VideoReport]
  averages: Dict[str, float]
  overall: float
  frame_map: Optional[float] = None

  @model_validator(mode="after")
  def validate_ranges(self):
    values = list(self.averages.values()) + [self.overall]
    for video in self.videos:
      values += list(video.map.values())
    if any(not 0.0 <= v <= 1.0 for v in values):
      raise ValueError("mAP values must lie in [0, 1]")
    return self
