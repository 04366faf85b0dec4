import json
import logging
import numpy as np
from pathlib import Path
from dataclasses import dataclass
from typing import List, Sequence, Tuple
from pydantic import BaseModel, ConfigDict

from app.config import ModelDims
from app.exceptions import ShapeError, StatisticsError
from app.schemas.labels import NUM_ANATOMY, NUM_PATHOLOGY, GroundTruthTrack
from app.services.anatomy_branch import (
  DenseLayer, Draw, GcnWeights, SsmWeights, build_gcn, build_mlp, build_ssm,
  dual_graph_gcn, frame_motion, selective_scan,
)
from app.utils.tensorio import ensure_finite, linear, load_tensor, matmul, mlp_forward, row_softmax, save_tensor

logger = logging.getLogger(__name__)

KERNEL_SIZE = 5
HALF_KERNEL = KERNEL_SIZE // 2

@dataclass(frozen=True)
class PathologyWeights:
  dev_proj: np.ndarray
  motion_proj: np.ndarray
  content_proj: np.ndarray
  gcn: GcnWeights
  dw_kernel: np.ndarray
  pw: np.ndarray
  ssm: SsmWeights
  fuse_proj: np.ndarray
  cond: Tuple[DenseLayer, ...]
  head: DenseLayer

class AnatomyPrototypes(BaseModel):
  """Healthy per-organ prototypes in raw patch-feature space"""

  model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

  prototypes: np.ndarray
  support: List[int]

def build_pathology_weights(draw: Draw, dims: ModelDims) -> PathologyWeights:
  d = dims.d
  return PathologyWeights(
    dev_proj=draw("dev_proj", (dims.patch_dim, d), "weight"),
    motion_proj=draw("motion_proj", (dims.patch_dim, d), "weight"),
    content_proj=draw("content_proj", (dims.patch_dim, d), "weight"),
    gcn=build_gcn(draw, "gcn", d),
    dw_kernel=draw("dw_kernel", (d, KERNEL_SIZE), "weight"),
    pw=draw("pw", (d, d), "weight"),
    ssm=build_ssm(draw, "ssm", d, dims.state_size),
    fuse_proj=draw("fuse_proj", (3 * d, d), "weight"),
    cond=build_mlp(draw, "cond", [NUM_ANATOMY, dims.cond_hidden, d]),
    head=DenseLayer(
      weight=draw("head.weight", (d, NUM_PATHOLOGY), "weight"),
      bias=draw("head.bias", (NUM_PATHOLOGY,), "bias"),
    ),
  )

def fit_prototypes(patches: Sequence[np.ndarray], tracks: Sequence[GroundTruthTrack]) -> AnatomyPrototypes:
  """Mean patch feature of healthy frames per organ; empty organs fall back to the global healthy mean"""

  if len(patches) != len(tracks) or not patches:
    raise StatisticsError("need one label track per feature matrix and at least one video")

  dim = patches[0].shape[1]
  sums = np.zeros((NUM_ANATOMY, dim), dtype=np.float64)
  counts = np.zeros(NUM_ANATOMY, dtype=np.int64)
  for patch, track in zip(patches, tracks):
    if patch.shape != (track.frames, dim):
      raise ShapeError(f"patch features {patch.shape} do not match {track.frames} labelled frames of width {dim}")
    healthy = track.pathology.sum(axis=1) == 0
    for a in range(NUM_ANATOMY):
      rows = patch[healthy & (track.anatomy == a)]
      if rows.shape[0]:
        sums[a] += rows.astype(np.float64).sum(axis=0)
        counts[a] += rows.shape[0]

  total = int(counts.sum())
  if total == 0:
    raise StatisticsError("no healthy frames in the training videos; prototypes are undefined")

  global_mean = sums.sum(axis=0) / total
  prototypes = np.empty((NUM_ANATOMY, dim), dtype=np.float64)
  for a in range(NUM_ANATOMY):
    if counts[a]:
      prototypes[a] = sums[a] / counts[a]
    else:
      logger.warning(f"Anatomy class {a} has no healthy frames; using the global healthy mean")
      prototypes[a] = global_mean

  logger.info(f"Fitted prototypes from {total} healthy frames, support {counts.tolist()}")
  return AnatomyPrototypes(prototypes=prototypes.astype(np.float32), support=[int(c) for c in counts])

def save_prototypes(directory, protos: AnatomyPrototypes) -> None:
  directory = Path(directory)
  save_tensor(directory / "prototypes.ten", protos.prototypes)
  (directory / "prototypes.json").write_text(json.dumps({"support": protos.support}, indent=2) + "\n", encoding="utf-8")

def load_prototypes(directory) -> AnatomyPrototypes:
  directory = Path(directory)
  prototypes = load_tensor(directory / "prototypes.ten")
  meta_path = directory / "prototypes.json"
  if not meta_path.exists():
    raise StatisticsError(f"missing {meta_path}", code="missing_file")
  support = json.loads(meta_path.read_text(encoding="utf-8"))["support"]
  if prototypes.shape[0] != NUM_ANATOMY or len(support) != NUM_ANATOMY:
    raise StatisticsError(f"prototypes in {directory} must have {NUM_ANATOMY} rows")
  return AnatomyPrototypes(prototypes=prototypes, support=support)

def deviation_signal(patch: np.ndarray, probs: np.ndarray, protos: AnatomyPrototypes) -> np.ndarray:
  """Patch feature minus the probability-weighted healthy prototype (probs are constants)"""

  if probs.shape != (patch.shape[0], NUM_ANATOMY):
    raise ShapeError(f"anatomy probabilities {probs.shape} do not match {patch.shape[0]} frames")
  sums = probs.sum(axis=1)
  if np.any(np.abs(sums - 1.0) > 1e-4):
    raise ValueError("anatomy probability rows must sum to 1 within 1e-4")
  expected = matmul(probs, protos.prototypes, dtype=patch.dtype)
  return patch - expected

def patch_motion(patch: np.ndarray) -> np.ndarray:
  return frame_motion(patch)

def ds_conv1d(h: np.ndarray, kernel: np.ndarray, pointwise: np.ndarray) -> np.ndarray:
  """Depthwise temporal conv (kernel 5, zero padding 2) followed by a pointwise projection"""

  T, d = h.shape
  if kernel.ndim != 2 or kernel.shape[1] != KERNEL_SIZE:
    raise ShapeError(f"depthwise kernel length must be {KERNEL_SIZE}, got shape {kernel.shape}")
  if kernel.shape[0] != d:
    raise ShapeError(f"depthwise kernel has {kernel.shape[0]} channels, input has {d}")
  if T < 1:
    raise ShapeError("convolution needs at least one frame")

  padded = np.zeros((T + 2 * HALF_KERNEL, d), dtype=h.dtype)
  padded[HALF_KERNEL:HALF_KERNEL + T] = h
  mixed = np.zeros_like(h)
  for j in range(KERNEL_SIZE):
    mixed += kernel[:, j].astype(h.dtype) * padded[j:j + T]
  return matmul(mixed, pointwise, dtype=h.dtype)

def pathology_temporal(h: np.ndarray, w: PathologyWeights, dims: ModelDims) -> np.ndarray:
  """Triple residual: conv output + scan output + pre-conv GCN output"""

  g = dual_graph_gcn(h, w.gcn, dims.gcn_k, dims.gcn_radius)
  c = ds_conv1d(g, w.dw_kernel, w.pw)
  m = selective_scan(c, w.ssm, "fwd")
  return c + m + g

def pathology_forward(
  patch: np.ndarray,
  anatomy_logits: np.ndarray,
  protos: AnatomyPrototypes,
  w: PathologyWeights,
  dims: ModelDims,
  return_fused: bool = False,
):
  """Pathology logits (T×9) for one window; anatomy logits enter as constants"""

  if anatomy_logits.shape != (patch.shape[0], NUM_ANATOMY):
    raise ShapeError(f"anatomy logits {anatomy_logits.shape} do not match {patch.shape[0]} frames")

  probs = row_softmax(anatomy_logits.astype(patch.dtype, copy=False))
  s_a = matmul(deviation_signal(patch, probs, protos), w.dev_proj)
  s_b = matmul(patch_motion(patch), w.motion_proj)
  s_c = pathology_temporal(matmul(patch, w.content_proj) + s_b, w, dims)

  fused = matmul(np.concatenate([s_a, s_b, s_c], axis=1), w.fuse_proj)
  fused = fused + mlp_forward(anatomy_logits.astype(fused.dtype, copy=False), [layer.as_layer() for layer in w.cond], dtype=fused.dtype)
  logits = ensure_finite(linear(fused, w.head.weight, w.head.bias), "pathology logits")
  if return_fused:
    return logits, fused
  return logits
