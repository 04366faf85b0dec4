"""
Deterministic inference post-processing.

Window logits are merged into per-frame probabilities, median filtered,
anatomy is Viterbi-decoded under the proximal-to-distal order, pathology is
gated by training co-occurrence, and the tracks are cut into segments that are
length-filtered and (for anatomy) gap-filled.
"""

import csv
import logging
import numpy as np
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple
from pydantic import BaseModel, ConfigDict

from app.config import PostprocessConfig, ViterbiConfig
from app.exceptions import LabelError, SegmentError, ShapeError, StatisticsError
from app.schemas.labels import NUM_ANATOMY, NUM_CLASSES, NUM_PATHOLOGY, PATHOLOGY_CLASSES, GroundTruthTrack
from app.schemas.segments import SegmentPrediction
from app.utils.tensorio import sigmoid

logger = logging.getLogger(__name__)

class PipelineResult(NamedTuple):
  probs: np.ndarray
  anatomy: np.ndarray
  segments: List[SegmentPrediction]

def merge_windows(window_logits: Sequence[np.ndarray], plan: Sequence[Tuple[int, int]], frames: int) -> np.ndarray:
  """Average per-window sigmoid probabilities over the windows covering each frame"""

  if len(window_logits) != len(plan):
    raise ShapeError(f"{len(window_logits)} logit blocks for a plan of {len(plan)} windows")

  total = np.zeros((frames, NUM_CLASSES), dtype=np.float64)
  coverage = np.zeros(frames, dtype=np.int64)
  for logits, (start, end) in zip(window_logits, plan):
    if start < 0 or end > frames or start >= end:
      raise ShapeError(f"window [{start}, {end}) outside a {frames}-frame video")
    if logits.shape != (end - start, NUM_CLASSES):
      raise ShapeError(f"window [{start}, {end}) has logits {logits.shape}, expected {(end - start, NUM_CLASSES)}")
    total[start:end] += sigmoid(logits.astype(np.float64))
    coverage[start:end] += 1

  if np.any(coverage == 0):
    first = int(np.argmax(coverage == 0))
    raise ShapeError(f"frame {first} is not covered by any window", code="uncovered")
  return total / coverage[:, None]

def median_filter(probs: np.ndarray, kernel: int = 5) -> np.ndarray:
  """Per-column running median; windows shrink at the edges instead of padding"""

  if kernel < 1 or kernel % 2 == 0:
    raise ValueError(f"median kernel must be a positive odd number, got {kernel}")

  probs = np.asarray(probs)
  squeeze = probs.ndim == 1
  x = probs[:, None] if squeeze else probs
  T = x.shape[0]
  half = kernel // 2
  out = np.empty_like(x, dtype=np.float64)

  if T > 2 * half:
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=0)
    out[half:T - half] = np.median(windows, axis=-1)
    edges = list(range(half)) + list(range(T - half, T))
  else:
    edges = range(T)
  for t in edges:
    out[t] = np.median(x[max(0, t - half):min(T, t + half + 1)], axis=0)

  return out[:, 0] if squeeze else out

def skip_transitions(states: int, skip_penalty: float) -> np.ndarray:
  """Log transition matrix: stay 0, forward by k organs -k*penalty, backward -inf"""

  i = np.arange(states)[:, None]
  j = np.arange(states)[None, :]
  return np.where(j >= i, -skip_penalty * (j - i).astype(np.float64), -np.inf)

def viterbi_decode(log_emissions: np.ndarray, transitions: np.ndarray) -> Tuple[np.ndarray, float]:
  """Max-score state path; ties go to the smallest state index"""

  T, S = log_emissions.shape
  if T == 0:
    raise ShapeError("cannot decode an empty sequence")
  if transitions.shape != (S, S):
    raise ShapeError(f"transition matrix {transitions.shape} does not match {S} states")

  states = np.arange(S)
  back = np.zeros((T, S), dtype=np.int64)
  score = log_emissions[0].copy()
  for t in range(1, T):
    candidates = score[:, None] + transitions
    back[t] = np.argmax(candidates, axis=0)
    score = candidates[back[t], states] + log_emissions[t]

  path = np.empty(T, dtype=np.int64)
  path[-1] = int(np.argmax(score))
  best = float(score[path[-1]])
  for t in range(T - 1, 0, -1):
    path[t - 1] = back[t, path[t]]
  return path, best

def viterbi_anatomy(probs: np.ndarray, cfg: Optional[ViterbiConfig] = None) -> np.ndarray:
  cfg = cfg or ViterbiConfig()
  if probs.ndim != 2 or probs.shape[1] != NUM_ANATOMY:
    raise ShapeError(f"anatomy probabilities must be T x {NUM_ANATOMY}, got {probs.shape}")
  if np.any(probs < 0):
    raise ValueError("anatomy probabilities must be >= 0")

  emissions = np.log(np.maximum(probs.astype(np.float64), cfg.emission_floor))
  path, score = viterbi_decode(emissions, skip_transitions(NUM_ANATOMY, cfg.skip_penalty))
  logger.debug(f"Viterbi decoded {probs.shape[0]} frames, score {score:.4f}")
  return path

class CoOccurrenceTable(BaseModel):
  """counts[a][p]: training frames with anatomy a and pathology p; frames[a]: frames with anatomy a"""

  model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

  counts: np.ndarray
  frames: np.ndarray

  @property
  def fitted(self) -> bool:
    return int(self.frames.sum()) > 0

  @classmethod
  def fit(cls, tracks: Sequence[GroundTruthTrack]) -> "CoOccurrenceTable":
    counts = np.zeros((NUM_ANATOMY, NUM_PATHOLOGY), dtype=np.int64)
    frames = np.zeros(NUM_ANATOMY, dtype=np.int64)
    for track in tracks:
      onehot = track.anatomy_onehot().astype(np.int64)
      counts += onehot.T @ track.pathology.astype(np.int64)
      frames += onehot.sum(axis=0)
    logger.info(f"Fitted co-occurrence table over {int(frames.sum())} frames, {int((counts == 0).sum())} empty pairs")
    return cls(counts=counts, frames=frames)

  def save_csv(self, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
      writer = csv.writer(fh, lineterminator="\n")
      writer.writerow(["frames"] + list(PATHOLOGY_CLASSES))
      for a in range(NUM_ANATOMY):
        writer.writerow([int(self.frames[a])] + [int(c) for c in self.counts[a]])

  @classmethod
  def load_csv(cls, path) -> "CoOccurrenceTable":
    path = Path(path)
    if not path.exists():
      raise StatisticsError(f"missing co-occurrence table {path}", code="missing_file")
    with open(path, newline="", encoding="utf-8") as fh:
      rows = [row for row in csv.reader(fh) if row]
    if rows and not rows[0][0].strip().isdigit():
      rows = rows[1:]
    if len(rows) != NUM_ANATOMY or any(len(row) != 1 + NUM_PATHOLOGY for row in rows):
      raise StatisticsError(f"{path} must hold {NUM_ANATOMY} rows of 1 + {NUM_PATHOLOGY} counts")
    try:
      values = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
    except ValueError:
      raise StatisticsError(f"{path} holds non-integer counts") from None
    if (values < 0).any():
      raise StatisticsError(f"{path} holds negative counts")
    return cls(counts=values[:, 1:], frames=values[:, 0])

def cooccurrence_gate(probs: np.ndarray, anatomy: np.ndarray, table: Optional[CoOccurrenceTable], min_count: int = 1) -> np.ndarray:
  """Zero pathology scores for (organ, pathology) pairs seen fewer than `min_count` times; anatomy becomes one-hot"""

  if table is None or not table.fitted:
    raise StatisticsError("co-occurrence table is not fitted", code="unfitted")
  if probs.shape != (anatomy.shape[0], NUM_CLASSES):
    raise ShapeError(f"probabilities {probs.shape} do not match {anatomy.shape[0]} decoded frames")

  gated = np.array(probs, dtype=np.float64)
  gated[:, :NUM_ANATOMY] = 0.0
  gated[np.arange(anatomy.shape[0]), anatomy] = 1.0
  allowed = table.counts[anatomy] >= min_count
  gated[:, NUM_ANATOMY:] = np.where(allowed, gated[:, NUM_ANATOMY:], 0.0)
  return gated

def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
  """Inclusive (start, end) of every maximal run of True"""

  padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
  edges = np.flatnonzero(np.diff(padded))
  return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]

def _confidence(column: np.ndarray, start: int, end: int) -> float:
  return float(min(max(column[start:end + 1].astype(np.float64).mean(), 0.0), 1.0))

def extract_segments(column: np.ndarray, threshold: float = 0.5, class_id: int = 0) -> List[SegmentPrediction]:
  """Maximal runs with prob above threshold; confidence is the mean prob over the run"""

  if not 0 < threshold < 1:
    raise ValueError(f"segment threshold {threshold} outside (0, 1)")
  return [
    SegmentPrediction(class_id=class_id, start=s, end=e, confidence=_confidence(column, s, e))
    for s, e in _runs(np.asarray(column) > threshold)
  ]

def track_segments(track: np.ndarray, scores: Optional[np.ndarray] = None) -> List[SegmentPrediction]:
  """Runs of a decoded index track; confidence from `scores[:, class]` when given"""

  segments = []
  for cls in np.unique(track):
    for s, e in _runs(track == cls):
      confidence = 1.0 if scores is None else _confidence(scores[:, cls], s, e)
      segments.append(SegmentPrediction(class_id=int(cls), start=s, end=e, confidence=confidence))
  return sorted(segments, key=lambda seg: seg.start)

def min_segment_filter(segments: Sequence[SegmentPrediction], min_len: int = 20) -> List[SegmentPrediction]:
  if min_len < 1:
    raise ValueError("min_len must be >= 1")
  return [seg for seg in segments if seg.length >= min_len]

def anatomy_gap_fill(segments: Sequence[SegmentPrediction], max_gap: int = 20) -> List[SegmentPrediction]:
  """Merge neighbouring same-class segments separated by at most `max_gap` frames"""

  ordered = sorted(segments, key=lambda seg: (seg.start, seg.end))
  for prev, nxt in zip(ordered, ordered[1:]):
    if nxt.start <= prev.end:
      raise SegmentError(f"segments [{prev.start}, {prev.end}] and [{nxt.start}, {nxt.end}] overlap")

  merged: List[SegmentPrediction] = []
  for seg in ordered:
    if merged and merged[-1].class_id == seg.class_id and seg.start - merged[-1].end - 1 <= max_gap:
      last = merged[-1]
      # Confidence is weighted by the frames each part actually scored.
      confidence = (last.confidence * last.length + seg.confidence * seg.length) / (last.length + seg.length)
      merged[-1] = SegmentPrediction(class_id=seg.class_id, start=last.start, end=seg.end, confidence=confidence)
    else:
      merged.append(seg)
  return merged

def run_pipeline_from_probs(
  probs: np.ndarray,
  table: CoOccurrenceTable,
  post: Optional[PostprocessConfig] = None,
  viterbi: Optional[ViterbiConfig] = None,
) -> PipelineResult:
  """median -> viterbi -> gate -> extract -> min-length filter -> anatomy gap fill"""

  post = post or PostprocessConfig()
  if probs.ndim != 2 or probs.shape[1] != NUM_CLASSES:
    raise ShapeError(f"frame probabilities must be T x {NUM_CLASSES}, got {probs.shape}")
  if np.any(probs < 0) or np.any(probs > 1):
    raise ValueError("frame probabilities must lie in [0, 1]")

  smoothed = median_filter(probs, post.median_kernel)
  anatomy = viterbi_anatomy(smoothed[:, :NUM_ANATOMY], viterbi)
  gated = cooccurrence_gate(smoothed, anatomy, table, post.gate_min_count)

  anatomy_segments = track_segments(anatomy, smoothed[:, :NUM_ANATOMY])
  pathology_segments: List[SegmentPrediction] = []
  for p in range(NUM_PATHOLOGY):
    pathology_segments += extract_segments(gated[:, NUM_ANATOMY + p], post.threshold, NUM_ANATOMY + p)

  anatomy_segments = anatomy_gap_fill(min_segment_filter(anatomy_segments, post.min_len), post.max_gap)
  pathology_segments = min_segment_filter(pathology_segments, post.min_len)
  logger.info(f"Post-processed {probs.shape[0]} frames: {len(anatomy_segments)} anatomy and {len(pathology_segments)} pathology segments")
  return PipelineResult(gated, anatomy, anatomy_segments + pathology_segments)

def run_pipeline(
  window_logits: Sequence[np.ndarray],
  plan: Sequence[Tuple[int, int]],
  frames: int,
  table: CoOccurrenceTable,
  post: Optional[PostprocessConfig] = None,
  viterbi: Optional[ViterbiConfig] = None,
) -> PipelineResult:
  return run_pipeline_from_probs(merge_windows(window_logits, plan, frames), table, post, viterbi)

def oracle_probabilities(track: GroundTruthTrack, high: float = 0.9, low: float = 0.1) -> np.ndarray:
  """Frame probabilities `high` on true labels and `low` elsewhere"""

  if not 0 <= low < high <= 1:
    raise LabelError(f"oracle margins must satisfy 0 <= low < high <= 1, got {low}/{high}")
  return np.where(track.multilabel() == 1.0, high, low)
