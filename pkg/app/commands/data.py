import logging
import argparse
from collections import Counter

from app.commands.common import add_common, prepare_out, require_dir, resolve_config, write_resolved
from app.exceptions import DatasetError
from app.schemas.labels import NUM_ANATOMY, class_name
from app.services.datasynth import read_dataset, synth_video, write_dataset
from app.services.evaluation import ground_truth_segments, segments_as_predictions, write_segments_csv
from app.services.pathology_branch import fit_prototypes, save_prototypes
from app.services.postprocess import CoOccurrenceTable

logger = logging.getLogger(__name__)

def register(subparsers) -> None:
  synth = subparsers.add_parser("synth", help="generate a seeded synthetic video dataset")
  add_common(synth)
  synth.add_argument("--frames", type=int, help="number of frames (overrides synth.frames)")
  synth.add_argument("--video-id", help="video id written to meta.json")
  synth.set_defaults(handler=cmd_synth)

  stats = subparsers.add_parser("fit-stats", help="fit healthy prototypes and the co-occurrence table")
  add_common(stats)
  stats.add_argument("--train", nargs="+", required=True, help="training dataset directories")
  stats.set_defaults(handler=cmd_fit_stats)

def cmd_synth(args: argparse.Namespace) -> int:
  """Write cls.ten, patch.ten, labels.csv, meta.json and the ground-truth segment dump"""

  synth = {}
  if args.frames is not None:
    synth["frames"] = args.frames
  if args.seed is not None:
    synth["seed"] = args.seed
  cfg = resolve_config(args, {"synth": synth} if synth else None)

  out = prepare_out(args.out)
  video = synth_video(cfg.synth, args.video_id)
  seq = video.features
  write_dataset(out, seq, video.track, seed=cfg.synth.seed)

  segments = ground_truth_segments(video.track)
  write_segments_csv(out / "gt_segments.csv", {seq.video_id: segments_as_predictions(segments)})
  write_resolved(out, cfg)

  counts = Counter({class_name(cls): len(runs) for cls, runs in segments.items()})
  anatomy = sum(len(runs) for cls, runs in segments.items() if cls < NUM_ANATOMY)
  pathology = sum(len(runs) for cls, runs in segments.items() if cls >= NUM_ANATOMY)
  print(f"video {seq.video_id}: T={seq.frames}, {anatomy} anatomy segments, {pathology} pathology segments")
  for name, count in sorted(counts.items()):
    print(f"  {name}: {count}")
  return 0

def cmd_fit_stats(args: argparse.Namespace) -> int:
  cfg = resolve_config(args)
  patches, tracks = [], []
  for train_dir in args.train:
    seq, gt = read_dataset(require_dir(train_dir, "training"))
    patches.append(seq.patch)
    tracks.append(gt)
  if not tracks:
    raise DatasetError("fit-stats needs at least one training directory")

  out = prepare_out(args.out)
  protos = fit_prototypes(patches, tracks)
  table = CoOccurrenceTable.fit(tracks)
  save_prototypes(out, protos)
  table.save_csv(out / "cooccur.csv")
  write_resolved(out, cfg)

  print(f"fitted statistics from {len(tracks)} videos ({sum(t.frames for t in tracks)} frames)")
  print(f"  healthy support per organ: {protos.support}")
  print(f"  empty anatomy-pathology pairs: {int((table.counts == 0).sum())}")
  return 0
