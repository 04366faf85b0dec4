"""
Training objective with closed-form gradients.

All terms are evaluated in float64 and return (value, d value / d logits).
Gradients are checked against central finite differences in gradcheck.py.
"""

import logging
import numpy as np
from typing import Dict, List, NamedTuple, Optional, Sequence

from app.config import LossConfig, SamplerConfig
from app.exceptions import LabelError, ShapeError
from app.schemas.labels import NUM_ANATOMY, NUM_PATHOLOGY, GroundTruthTrack
from app.utils.rng import SplitMix64
from app.utils.tensorio import row_softmax, sigmoid

logger = logging.getLogger(__name__)

class LossValue(NamedTuple):
  value: float
  grad: np.ndarray

class TotalLoss(NamedTuple):
  value: float
  anatomy_grad: np.ndarray
  pathology_grad: np.ndarray
  terms: Dict[str, float]

class SampleWindow(NamedTuple):
  video: int
  start: int
  end: int

def _log_sigmoid(z: np.ndarray) -> np.ndarray:
  return -np.logaddexp(0.0, -z)

def asl_loss(
  logits: np.ndarray,
  targets: np.ndarray,
  gamma_pos: float = 0.0,
  gamma_neg: float = 4.0,
  clip: float = 0.05,
  frame_weights: Optional[np.ndarray] = None,
  class_weights: Optional[np.ndarray] = None,
  pos_weights: Optional[np.ndarray] = None,
) -> LossValue:
  """Asymmetric loss averaged over all frame-class cells, with its exact gradient"""

  z = np.asarray(logits, dtype=np.float64)
  y = np.asarray(targets, dtype=np.float64)
  if z.ndim != 2 or y.shape != z.shape:
    raise ShapeError(f"logits {z.shape} and targets {y.shape} must be matching T x C matrices")
  if not np.isin(y, (0.0, 1.0)).all():
    raise LabelError("ASL targets must be binary")

  T, C = z.shape
  w_frame = np.ones(T) if frame_weights is None else np.asarray(frame_weights, dtype=np.float64)
  w_class = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
  w_pos = np.ones(C) if pos_weights is None else np.asarray(pos_weights, dtype=np.float64)
  if w_frame.shape != (T,) or w_class.shape != (C,) or w_pos.shape != (C,):
    raise ShapeError("frame weights must have length T and class weights length C")
  if (w_frame <= 0).any() or (w_class <= 0).any() or (w_pos <= 0).any():
    raise ValueError("loss weights must be > 0")

  p = sigmoid(z)
  q = sigmoid(-z)
  log_p = _log_sigmoid(z)

  # positives: -b (1-p)^g+ log p
  focus_pos = q ** gamma_pos
  pos_term = -w_pos * focus_pos * log_p
  pos_grad = -w_pos * focus_pos * (q - gamma_pos * p * log_p)

  # negatives: -(p_m)^g- log(1 - p_m), p_m = max(p - m, 0)
  p_m = np.maximum(p - clip, 0.0)
  active = p > clip
  log_keep = np.log1p(-p_m)
  focus_neg = p_m ** gamma_neg
  neg_term = np.where(active, -focus_neg * log_keep, 0.0)
  if gamma_neg > 0:
    d_focus = gamma_neg * np.where(active, p_m ** (gamma_neg - 1.0), 0.0)
  else:
    d_focus = np.zeros_like(p_m)
  d_neg_dpm = -d_focus * log_keep + focus_neg / (1.0 - p_m)
  neg_grad = np.where(active, d_neg_dpm * p * q, 0.0)

  scale = w_frame[:, None] * w_class[None, :] / (T * C)
  terms = np.where(y == 1.0, pos_term, neg_term)
  grads = np.where(y == 1.0, pos_grad, neg_grad)
  return LossValue(float((terms * scale).sum()), grads * scale)

def label_changes(gt: GroundTruthTrack) -> np.ndarray:
  """change[t] is True when any label at t differs from t-1 (never at t=0)"""

  change = np.zeros(gt.frames, dtype=bool)
  if gt.frames > 1:
    change[1:] = (np.diff(gt.anatomy) != 0) | (np.diff(gt.pathology.astype(np.int8), axis=0) != 0).any(axis=1)
  return change

def boundary_weights(gt: GroundTruthTrack, boost: float = 1.0, radius: int = 3) -> np.ndarray:
  """1 + boost on frames within `radius` of a label change, else 1"""

  if radius < 0:
    raise ValueError("boundary radius must be >= 0")
  change = label_changes(gt).astype(np.int64)
  window = np.ones(2 * radius + 1, dtype=np.int64)
  # "full" keeps length T + 2r even when the kernel is longer than the track
  near = np.convolve(change, window, mode="full")[radius:radius + gt.frames] > 0
  return np.where(near, 1.0 + boost, 1.0)

def monotonicity_loss(anatomy_logits: np.ndarray) -> LossValue:
  """Hinge on decreases of the expected organ index between consecutive frames"""

  z = np.asarray(anatomy_logits, dtype=np.float64)
  if z.ndim != 2 or z.shape[0] < 2:
    raise ShapeError("monotonicity loss needs at least two frames")

  T, A = z.shape
  q = row_softmax(z)
  organ = np.arange(A, dtype=np.float64)
  expected = q @ organ
  drop = expected[:-1] - expected[1:]
  violating = drop > 0
  value = float(drop[violating].sum() / (T - 1))

  d_expected = np.zeros(T)
  d_expected[:-1] += violating / (T - 1)
  d_expected[1:] -= violating / (T - 1)
  grad = d_expected[:, None] * q * (organ[None, :] - expected[:, None])
  return LossValue(value, grad)

def total_loss(anatomy_logits: np.ndarray, pathology_logits: np.ndarray, gt: GroundTruthTrack, cfg: LossConfig) -> TotalLoss:
  """Boundary-weighted ASL on both heads plus the weighted monotonicity hinge"""

  if anatomy_logits.shape != (gt.frames, NUM_ANATOMY) or pathology_logits.shape != (gt.frames, NUM_PATHOLOGY):
    raise ShapeError(f"logits {anatomy_logits.shape}/{pathology_logits.shape} do not match {gt.frames} labelled frames")

  frame_w = boundary_weights(gt, cfg.boundary_boost, cfg.boundary_radius)
  anatomy = asl_loss(
    anatomy_logits, gt.anatomy_onehot(), cfg.gamma_pos, cfg.gamma_neg, cfg.clip,
    frame_weights=frame_w, pos_weights=np.array(cfg.anatomy_boost_vector()),
  )
  pathology = asl_loss(
    pathology_logits, gt.pathology, cfg.gamma_pos, cfg.gamma_neg, cfg.clip,
    frame_weights=frame_w, class_weights=np.array(cfg.pathology_weight_vector()),
  )

  terms = {"anatomy_asl": anatomy.value, "pathology_asl": pathology.value, "monotonicity": 0.0}
  anatomy_grad = anatomy.grad.copy()
  if cfg.mono_weight > 0:
    mono = monotonicity_loss(anatomy_logits)
    terms["monotonicity"] = cfg.mono_weight * mono.value
    anatomy_grad += cfg.mono_weight * mono.grad

  value = terms["anatomy_asl"] + terms["pathology_asl"] + terms["monotonicity"]
  return TotalLoss(value, anatomy_grad, pathology.grad, terms)

def window_weights(tracks: Sequence[GroundTruthTrack], plan: Sequence[SampleWindow], cfg: SamplerConfig) -> np.ndarray:
  rare = cfg.rare_indices()
  weights = np.ones(len(plan))
  for i, (video, start, end) in enumerate(plan):
    if rare and tracks[video].pathology[start:end][:, rare].any():
      weights[i] = cfg.oversample
  return weights

def sample_windows(tracks: Sequence[GroundTruthTrack], plan: Sequence[SampleWindow], cfg: SamplerConfig, seed: int, n: int) -> List[int]:
  """Seeded categorical draws with replacement; rare-pathology windows weigh `oversample`"""

  if not plan:
    raise ValueError("cannot sample from an empty window plan")
  if n < 1:
    raise ValueError("number of draws must be >= 1")

  weights = window_weights(tracks, plan, cfg)
  cumulative = np.cumsum(weights)
  u = SplitMix64(seed, "window_sampler").uniform(n) * cumulative[-1]
  picks = np.searchsorted(cumulative, u, side="right")
  logger.debug(f"Sampled {n} windows from {len(plan)} ({int((weights > 1).sum())} oversampled)")
  return [int(i) for i in np.minimum(picks, len(plan) - 1)]
