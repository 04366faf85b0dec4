import json
import logging
import numpy as np
from pathlib import Path
from typing import List, NamedTuple, Tuple

from app.config import ModelDims, WindowConfig
from app.exceptions import ShapeError, TensorFileError
from app.schemas.labels import NUM_CLASSES, FeatureSequence
from app.services.anatomy_branch import AnatomyWeights, WindowContext, anatomy_forward
from app.services.datasynth import window_plan
from app.services.pathology_branch import AnatomyPrototypes, PathologyWeights, pathology_forward
from app.services.postprocess import merge_windows
from app.utils.tensorio import load_tensor, save_tensor

logger = logging.getLogger(__name__)

class InferenceResult(NamedTuple):
  plan: List[Tuple[int, int]]
  window_logits: List[np.ndarray]
  probs: np.ndarray

def forward_window(
  seq: FeatureSequence,
  start: int,
  end: int,
  anatomy_w: AnatomyWeights,
  pathology_w: PathologyWeights,
  protos: AnatomyPrototypes,
  dims: ModelDims,
) -> np.ndarray:
  """Both branches on frames [start, end); returns (end - start) x 17 logits"""

  window = seq.window(start, end)
  anatomy_logits = anatomy_forward(window.cls, WindowContext(start=start, total=seq.frames), anatomy_w, dims)
  pathology_logits = pathology_forward(window.patch, anatomy_logits, protos, pathology_w, dims)
  return np.concatenate([anatomy_logits, pathology_logits], axis=1)

def run_inference(
  seq: FeatureSequence,
  anatomy_w: AnatomyWeights,
  pathology_w: PathologyWeights,
  protos: AnatomyPrototypes,
  dims: ModelDims,
  windows: WindowConfig,
) -> InferenceResult:
  if seq.cls.shape[1] != dims.cls_dim or seq.patch.shape[1] != dims.patch_dim:
    raise ShapeError(
      f"features are {seq.cls.shape[1]}/{seq.patch.shape[1]} wide but the model expects {dims.cls_dim}/{dims.patch_dim}"
    )

  plan = window_plan(seq.frames, windows.window, windows.stride)
  logger.info(f"Running inference on {seq.video_id}: {seq.frames} frames in {len(plan)} windows")

  window_logits = []
  for i, (start, end) in enumerate(plan):
    window_logits.append(forward_window(seq, start, end, anatomy_w, pathology_w, protos, dims))
    logger.debug(f"Window {i + 1}/{len(plan)} [{start}, {end}) done")

  probs = merge_windows(window_logits, plan, seq.frames)
  return InferenceResult(plan, window_logits, probs)

def save_inference(directory, video_id: str, result: InferenceResult) -> Path:
  """window_logits.ten (N x W x 17), plan.json and the merged probs.ten (T x 17)"""

  directory = Path(directory)
  directory.mkdir(parents=True, exist_ok=True)
  save_tensor(directory / "window_logits.ten", np.stack(result.window_logits).astype(np.float32))
  save_tensor(directory / "probs.ten", result.probs.astype(np.float32))
  plan = {"video_id": video_id, "frames": int(result.probs.shape[0]), "windows": [list(w) for w in result.plan]}
  (directory / "plan.json").write_text(json.dumps(plan, indent=2) + "\n", encoding="utf-8")
  logger.info(f"Saved inference outputs for {video_id} to {directory}")
  return directory

def load_probs(path) -> np.ndarray:
  probs = load_tensor(path)
  if probs.ndim != 2 or probs.shape[1] != NUM_CLASSES:
    raise TensorFileError(f"{path} holds {probs.shape}, expected T x {NUM_CLASSES} probabilities", code="shape")
  return probs.astype(np.float64)
