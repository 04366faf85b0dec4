import numpy as np
from typing import Tuple
from pydantic import BaseModel, ConfigDict, model_validator

from app.exceptions import LabelError, ShapeError

# Proximal-to-distal traversal order; the index order is the biological order.
ANATOMY_CLASSES: Tuple[str, ...] = (
  "mouth",
  "esophagus",
  "z-line",
  "stomach",
  "pylorus",
  "small intestine",
  "ileocecal valve",
  "colon",
)

PATHOLOGY_CLASSES: Tuple[str, ...] = (
  "active bleeding",
  "angiectasia",
  "blood",
  "erosion",
  "erythema",
  "hematin",
  "lymphangioectasis",
  "polyp",
  "ulcer",
)

NUM_ANATOMY = len(ANATOMY_CLASSES)
NUM_PATHOLOGY = len(PATHOLOGY_CLASSES)
NUM_CLASSES = NUM_ANATOMY + NUM_PATHOLOGY
ALL_CLASSES: Tuple[str, ...] = ANATOMY_CLASSES + PATHOLOGY_CLASSES

def class_name(class_id: int) -> str:
  if not 0 <= class_id < NUM_CLASSES:
    raise LabelError(f"class id {class_id} outside [0, {NUM_CLASSES})")
  return ALL_CLASSES[class_id]

def anatomy_index(name: str) -> int:
  try:
    return ANATOMY_CLASSES.index(name)
  except ValueError:
    raise LabelError(f"unknown anatomy class '{name}'") from None

def pathology_index(name: str) -> int:
  try:
    return PATHOLOGY_CLASSES.index(name)
  except ValueError:
    raise LabelError(f"unknown pathology class '{name}'") from None

class FeatureSequence(BaseModel):
  """Per-frame CLS and patch-mean features of one video"""

  model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

  video_id: str
  cls: np.ndarray
  patch: np.ndarray

  @model_validator(mode="after")
  def check_shapes(self):
    if self.cls.ndim != 2 or self.patch.ndim != 2:
      raise ShapeError("cls and patch features must be 2-D (frames x dims)")
    if self.cls.shape[0] != self.patch.shape[0]:
      raise ShapeError(f"cls has {self.cls.shape[0]} frames but patch has {self.patch.shape[0]}")
    return self

  @property
  def frames(self) -> int:
    return self.cls.shape[0]

  def window(self, start: int, end: int) -> "FeatureSequence":
    return FeatureSequence(video_id=self.video_id, cls=self.cls[start:end], patch=self.patch[start:end])

class GroundTruthTrack(BaseModel):
  """Per-frame labels: one anatomy index per frame plus 9 pathology bits"""

  model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

  anatomy: np.ndarray
  pathology: np.ndarray

  @model_validator(mode="after")
  def check_track(self):
    anatomy = self.anatomy
    if anatomy.ndim != 1:
      raise LabelError("anatomy track must be 1-D")
    if self.pathology.shape != (anatomy.shape[0], NUM_PATHOLOGY):
      raise LabelError(f"pathology track must be {anatomy.shape[0]}x{NUM_PATHOLOGY}, got {self.pathology.shape}")
    if anatomy.size and (anatomy.min() < 0 or anatomy.max() >= NUM_ANATOMY):
      raise LabelError("anatomy index outside [0, 8)")
    if np.any(np.diff(anatomy) < 0):
      first = int(np.argmax(np.diff(anatomy) < 0)) + 1
      raise LabelError(f"anatomy track decreases at frame {first}; traversal must be monotone")
    if not np.isin(self.pathology, (0, 1)).all():
      raise LabelError("pathology labels must be binary")
    return self

  @property
  def frames(self) -> int:
    return self.anatomy.shape[0]

  def anatomy_onehot(self) -> np.ndarray:
    onehot = np.zeros((self.frames, NUM_ANATOMY), dtype=np.float64)
    onehot[np.arange(self.frames), self.anatomy] = 1.0
    return onehot

  def multilabel(self) -> np.ndarray:
    """T x 17 binary matrix, anatomy columns first"""

    return np.concatenate([self.anatomy_onehot(), self.pathology.astype(np.float64)], axis=1)

  def window(self, start: int, end: int) -> "GroundTruthTrack":
    return GroundTruthTrack(anatomy=self.anatomy[start:end], pathology=self.pathology[start:end])
