import os
import csv
import logging
import numpy as np
from pathlib import Path
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple
from jinja2 import Environment, FileSystemLoader
from sklearn.metrics import average_precision_score

from app.exceptions import EvaluationError, LabelError, ShapeError
from app.schemas.labels import NUM_ANATOMY, NUM_CLASSES, NUM_PATHOLOGY, GroundTruthTrack, class_name
from app.schemas.report import ClassAP, EvalReport, VideoReport, threshold_key
from app.schemas.segments import SegmentPrediction

logger = logging.getLogger(__name__)

Interval = Tuple[int, int]
GroundTruthSegments = Dict[int, List[Interval]]

SEGMENT_HEADER = ["video_id", "class_id", "class_name", "start", "end", "confidence"]
DEFAULT_THRESHOLDS = (0.5, 0.95)

def _interval(seg) -> Interval:
  if isinstance(seg, SegmentPrediction):
    return seg.start, seg.end
  return int(seg[0]), int(seg[1])

def temporal_iou(a, b) -> float:
  """Frame-count IoU of two inclusive intervals"""

  a_start, a_end = _interval(a)
  b_start, b_end = _interval(b)
  inter = min(a_end, b_end) - max(a_start, b_start) + 1
  if inter <= 0:
    return 0.0
  union = (a_end - a_start + 1) + (b_end - b_start + 1) - inter
  return inter / union

def _ap_from_hits(hits: Sequence[bool], positives: int) -> float:
  """All-point AP with precision made monotone from the right"""

  if positives == 0 or not len(hits):
    return 0.0
  hits = np.asarray(hits, dtype=bool)
  tp = np.cumsum(hits)
  precision = tp / np.arange(1, len(hits) + 1)
  precision = np.maximum.accumulate(precision[::-1])[::-1]
  recall = tp / positives
  steps = np.diff(np.concatenate([[0.0], recall]))
  return float((steps * precision).sum())

def average_precision(preds: Sequence[SegmentPrediction], gt: Sequence[Interval], iou_thr: float) -> Optional[float]:
  """
  Greedy one-to-one matching in confidence order (ties by start frame); each
  prediction takes the unmatched ground-truth interval with the highest IoU,
  earliest on ties, and counts as a hit when that IoU reaches `iou_thr`.
  Returns None when there is nothing to score.
  """

  if len({p.class_id for p in preds}) > 1:
    raise EvaluationError("average_precision expects predictions of a single class")
  if not gt:
    return None if not preds else 0.0
  if not preds:
    return 0.0

  gt = sorted(_interval(g) for g in gt)
  matched = [False] * len(gt)
  hits = []
  for pred in sorted(preds, key=lambda p: (-p.confidence, p.start)):
    best, best_iou = -1, 0.0
    for i, interval in enumerate(gt):
      if matched[i]:
        continue
      iou = temporal_iou(pred, interval)
      if iou > best_iou:
        best, best_iou = i, iou
    hit = best >= 0 and best_iou >= iou_thr
    if hit:
      matched[best] = True
    hits.append(hit)
  return _ap_from_hits(hits, len(gt))

def _runs(mask: np.ndarray) -> List[Interval]:
  padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
  edges = np.flatnonzero(np.diff(padded))
  return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]

def ground_truth_segments(track: GroundTruthTrack) -> GroundTruthSegments:
  """Per-class sorted, disjoint inclusive intervals of a label track"""

  segments: GroundTruthSegments = {}
  for a in range(NUM_ANATOMY):
    runs = _runs(track.anatomy == a)
    if runs:
      segments[a] = runs
  for p in range(NUM_PATHOLOGY):
    runs = _runs(track.pathology[:, p] == 1)
    if runs:
      segments[NUM_ANATOMY + p] = runs
  return segments

def segments_as_predictions(segments: GroundTruthSegments) -> List[SegmentPrediction]:
  preds = [
    SegmentPrediction(class_id=cls, start=s, end=e, confidence=1.0)
    for cls, intervals in segments.items() for s, e in intervals
  ]
  return sorted(preds, key=lambda p: (p.class_id, p.start))

def video_map(
  video_id: str,
  preds: Sequence[SegmentPrediction],
  gt: GroundTruthSegments,
  thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> VideoReport:
  """mAP per threshold over the classes that have ground truth"""

  by_class: Dict[int, List[SegmentPrediction]] = defaultdict(list)
  for pred in preds:
    by_class[pred.class_id].append(pred)

  per_class = []
  for cls in sorted(set(by_class) | set(gt)):
    ap = {threshold_key(thr): average_precision(by_class.get(cls, []), gt.get(cls, []), thr) for thr in thresholds}
    per_class.append(ClassAP(
      class_id=cls, class_name=class_name(cls), gt_segments=len(gt.get(cls, [])), predictions=len(by_class.get(cls, [])), ap=ap,
    ))

  scored = [c for c in per_class if c.gt_segments]
  if not scored:
    logger.warning(f"Video {video_id} has no ground-truth segments; reporting mAP 0")
  mean_ap = {
    threshold_key(thr): float(np.mean([c.ap[threshold_key(thr)] for c in scored])) if scored else 0.0
    for thr in thresholds
  }
  return VideoReport(video_id=video_id, map=mean_ap, per_class=per_class)

def aggregate(reports: Sequence[VideoReport], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
  """Unweighted mean over videos per threshold; overall is the mean of those averages"""

  if not reports:
    raise EvaluationError("cannot aggregate an empty list of videos")

  averages = {}
  for thr in thresholds:
    key = threshold_key(thr)
    missing = [r.video_id for r in reports if key not in r.map]
    if missing:
      raise EvaluationError(f"videos {missing} have no mAP@{key}")
    averages[key] = float(np.mean([r.map[key] for r in reports]))

  frame_maps = [r.frame_map for r in reports if r.frame_map is not None]
  return EvalReport(
    thresholds=list(thresholds),
    videos=list(reports),
    averages=averages,
    overall=float(np.mean(list(averages.values()))),
    frame_map=float(np.mean(frame_maps)) if frame_maps else None,
  )

def frame_map(probs: np.ndarray, track: GroundTruthTrack) -> float:
  """Mean per-class frame-ranking AP over classes with at least one positive frame"""

  labels = track.multilabel()
  if probs.shape != labels.shape:
    raise ShapeError(f"probabilities {probs.shape} do not match labels {labels.shape}")

  aps = [
    float(average_precision_score(labels[:, c], probs[:, c]))
    for c in range(NUM_CLASSES) if labels[:, c].any()
  ]
  return float(np.mean(aps)) if aps else 0.0

def write_segments_csv(path, rows: Dict[str, Sequence[SegmentPrediction]]) -> Path:
  """Segments of one or more videos as `video_id,class_id,class_name,start,end,confidence`"""

  path = Path(path)
  with open(path, "w", newline="", encoding="utf-8") as fh:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SEGMENT_HEADER)
    for video_id, segments in rows.items():
      for seg in segments:
        writer.writerow([video_id, seg.class_id, class_name(seg.class_id), seg.start, seg.end, f"{seg.confidence:.6f}"])
  return path

def read_segments_csv(path) -> Dict[str, List[SegmentPrediction]]:
  path = Path(path)
  if not path.exists():
    raise EvaluationError(f"missing segments file {path}", code="missing_file")

  rows: Dict[str, List[SegmentPrediction]] = {}
  with open(path, newline="", encoding="utf-8") as fh:
    reader = csv.DictReader(fh)
    if reader.fieldnames != SEGMENT_HEADER:
      raise EvaluationError(f"{path}: expected header {','.join(SEGMENT_HEADER)}")
    for line_no, row in enumerate(reader, start=2):
      try:
        seg = SegmentPrediction(
          class_id=int(row["class_id"]), start=int(row["start"]), end=int(row["end"]), confidence=float(row["confidence"]),
        )
      except (TypeError, ValueError) as e:
        raise EvaluationError(f"{path}:{line_no}: {e}") from None
      rows.setdefault(row["video_id"], []).append(seg)
  return rows

def read_video_scores(path, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Dict[str, List[VideoReport]]:
  """Per-video mAP fixtures `phase,video_id,map@<thr>...` grouped by phase in file order"""

  path = Path(path)
  if not path.exists():
    raise EvaluationError(f"missing score file {path}", code="missing_file")

  columns = [f"map@{threshold_key(thr)}" for thr in thresholds]
  phases: Dict[str, List[VideoReport]] = {}
  with open(path, newline="", encoding="utf-8") as fh:
    reader = csv.DictReader(fh)
    needed = ["phase", "video_id"] + columns
    if reader.fieldnames is None or any(col not in reader.fieldnames for col in needed):
      raise EvaluationError(f"{path}: expected columns {','.join(needed)}")
    for line_no, row in enumerate(reader, start=2):
      try:
        scores = {threshold_key(thr): float(row[col]) for thr, col in zip(thresholds, columns)}
      except ValueError:
        raise EvaluationError(f"{path}:{line_no}: non-numeric score") from None
      phases.setdefault(row["phase"], []).append(VideoReport(video_id=row["video_id"], map=scores))
  return phases

def evaluate_videos(
  preds: Dict[str, Sequence[SegmentPrediction]],
  tracks: Dict[str, GroundTruthTrack],
  thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
  probs: Optional[Dict[str, np.ndarray]] = None,
) -> EvalReport:
  """Score every labelled video; videos without predictions score as total misses"""

  unknown = sorted(set(preds) - set(tracks))
  if unknown:
    raise LabelError(f"predictions for videos without labels: {unknown}")

  reports = []
  for video_id, track in tracks.items():
    report = video_map(video_id, preds.get(video_id, []), ground_truth_segments(track), thresholds)
    if probs and video_id in probs:
      report = report.model_copy(update={"frame_map": frame_map(probs[video_id], track)})
    logger.info(f"Video {video_id}: " + ", ".join(f"mAP@{k}={v:.4f}" for k, v in report.map.items()))
    reports.append(report)
  return aggregate(reports, thresholds)

def _template_env() -> Environment:
  template_dir = os.path.join(os.path.dirname(os.path.dirname(__file__)), "templates")
  return Environment(loader=FileSystemLoader(template_dir), trim_blocks=True, lstrip_blocks=True, keep_trailing_newline=True)

def render_table(phases: Sequence[Tuple[str, EvalReport]], title: str = "Temporal mAP") -> str:
  """Plain-text table: per-video rows, the average row and the overall score, one block per phase"""

  if not phases:
    raise EvaluationError("nothing to render")
  keys = [threshold_key(thr) for thr in phases[0][1].thresholds]
  template = _template_env().get_template("eval_table.txt.j2")
  return template.render(title=title, keys=keys, phases=phases)
