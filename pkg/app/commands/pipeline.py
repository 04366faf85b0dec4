import json
import logging
import argparse
from pathlib import Path

from app.commands.common import add_common, prepare_out, require_dir, resolve_config, write_resolved
from app.exceptions import DatasetError
from app.schemas.labels import NUM_ANATOMY
from app.services.evaluation import write_segments_csv
from app.services.inference import load_probs
from app.services.postprocess import CoOccurrenceTable, run_pipeline_from_probs
from app.utils.tensorio import save_tensor

logger = logging.getLogger(__name__)

def register(subparsers) -> None:
  post = subparsers.add_parser("postprocess", help="turn merged frame probabilities into segments")
  add_common(post)
  post.add_argument("--probs", required=True, help="T x 17 probability TensorFile (probs.ten)")
  post.add_argument("--stats", required=True, help="statistics directory holding cooccur.csv")
  post.add_argument("--video-id", help="video id for the segment rows (default: plan.json next to --probs)")
  post.set_defaults(handler=cmd_postprocess)

def _video_id(probs_path: Path, explicit: str) -> str:
  if explicit:
    return explicit
  plan_path = probs_path.parent / "plan.json"
  if plan_path.exists():
    return json.loads(plan_path.read_text(encoding="utf-8"))["video_id"]
  return probs_path.stem

def cmd_postprocess(args: argparse.Namespace) -> int:
  """Writes segments.csv and the final (decoded and gated) probability track"""

  cfg = resolve_config(args)
  probs_path = Path(args.probs)
  if not probs_path.exists():
    raise DatasetError(f"missing probability file {probs_path}", code="missing_file")

  probs = load_probs(probs_path)
  table = CoOccurrenceTable.load_csv(require_dir(args.stats, "statistics") / "cooccur.csv")
  result = run_pipeline_from_probs(probs, table, cfg.postprocess, cfg.viterbi)

  video_id = _video_id(probs_path, args.video_id)
  out = prepare_out(args.out)
  write_segments_csv(out / "segments.csv", {video_id: result.segments})
  save_tensor(out / "final_probs.ten", result.probs.astype("float32"))
  write_resolved(out, cfg)

  anatomy = sum(1 for s in result.segments if s.class_id < NUM_ANATOMY)
  print(f"video {video_id}: {anatomy} anatomy segments, {len(result.segments) - anatomy} pathology segments")
  return 0
