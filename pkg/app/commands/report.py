import json
import logging
import argparse
from pathlib import Path
from typing import Dict, List, Tuple

from app.commands.common import add_common, prepare_out, require_dir, resolve_config, write_resolved
from app.exceptions import ConfigError, EvaluationError
from app.schemas.report import EvalReport
from app.services.datasynth import read_labels, read_meta
from app.services.evaluation import aggregate, evaluate_videos, read_segments_csv, read_video_scores, render_table
from app.services.inference import load_probs

logger = logging.getLogger(__name__)

def register(subparsers) -> None:
  ev = subparsers.add_parser("eval", help="temporal mAP of predicted segments against labels")
  add_common(ev)
  ev.add_argument("--segments", help="segments CSV (video_id,class_id,class_name,start,end,confidence)")
  ev.add_argument("--labels", nargs="+", help="dataset directories holding labels.csv and meta.json")
  ev.add_argument("--probs", nargs="+", help="probability tracks for frame-level mAP, one per --labels entry")
  ev.add_argument("--thresholds", nargs="+", type=float, help="temporal IoU thresholds (default from config)")
  ev.add_argument("--baseline", help="earlier report.json rendered as the Before phase")
  ev.add_argument("--video-scores", help="CSV of per-video mAP values to aggregate directly")
  ev.set_defaults(handler=cmd_eval)

def _score_phases(args: argparse.Namespace, thresholds: List[float]) -> List[Tuple[str, EvalReport]]:
  phases = read_video_scores(args.video_scores, thresholds)
  if not phases:
    raise EvaluationError(f"{args.video_scores} holds no scores")
  return [(name, aggregate(reports, thresholds)) for name, reports in phases.items()]

def _labelled_phases(args: argparse.Namespace, thresholds: List[float]) -> List[Tuple[str, EvalReport]]:
  if not args.segments or not args.labels:
    raise ConfigError("eval needs --segments and --labels (or --video-scores)")
  if args.probs and len(args.probs) != len(args.labels):
    raise ConfigError(f"{len(args.probs)} --probs files for {len(args.labels)} --labels directories")

  tracks, probs = {}, {}
  for i, label_dir in enumerate(args.labels):
    directory = require_dir(label_dir, "labels")
    video_id = read_meta(directory).video_id
    tracks[video_id] = read_labels(directory / "labels.csv")
    if args.probs:
      probs[video_id] = load_probs(args.probs[i])

  report = evaluate_videos(read_segments_csv(args.segments), tracks, thresholds, probs or None)
  if not args.baseline:
    return [("Run", report)]

  baseline_path = Path(args.baseline)
  if not baseline_path.exists():
    raise EvaluationError(f"missing baseline report {baseline_path}", code="missing_file")
  baseline = EvalReport.model_validate_json(baseline_path.read_text(encoding="utf-8"))
  return [("Before", baseline), ("After", report)]

def cmd_eval(args: argparse.Namespace) -> int:
  """Writes report.json (one entry per phase) and the plain-text table report.txt"""

  cfg = resolve_config(args, {"thresholds": args.thresholds} if args.thresholds else None)
  thresholds = list(cfg.thresholds)
  phases = _score_phases(args, thresholds) if args.video_scores else _labelled_phases(args, thresholds)

  out = prepare_out(args.out)
  table = render_table(phases)
  if len(phases) == 1:
    payload: Dict = phases[0][1].model_dump()
  else:
    payload = {name: report.model_dump() for name, report in phases}
  (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
  (out / "report.txt").write_text(table, encoding="utf-8")
  write_resolved(out, cfg)
  print(table, end="")
  return 0
