import logging
import argparse

from app.commands.common import add_common, prepare_out, require_dir, resolve_config, write_resolved
from app.services.datasynth import read_dataset
from app.services.inference import run_inference, save_inference
from app.services.pathology_branch import load_prototypes
from app.services.weights import (
  init_anatomy_weights, init_pathology_weights, load_anatomy_weights, load_pathology_weights, save_weights,
)

logger = logging.getLogger(__name__)

def register(subparsers) -> None:
  init = subparsers.add_parser("init-weights", help="write Xavier-initialised weights for both branches")
  add_common(init)
  init.set_defaults(handler=cmd_init_weights)

  infer = subparsers.add_parser("infer", help="run both branches over the window plan of one video")
  add_common(infer)
  infer.add_argument("--data", required=True, help="dataset directory (cls.ten, patch.ten)")
  infer.add_argument("--weights", required=True, help="weights directory with anatomy.json and pathology.json")
  infer.add_argument("--stats", required=True, help="statistics directory from fit-stats")
  infer.set_defaults(handler=cmd_infer)

def cmd_init_weights(args: argparse.Namespace) -> int:
  cfg = resolve_config(args)
  out = prepare_out(args.out)
  save_weights(out, "anatomy", init_anatomy_weights(cfg.model, cfg.windows.window, cfg.seed))
  save_weights(out, "pathology", init_pathology_weights(cfg.model, cfg.seed))
  write_resolved(out, cfg)
  print(f"wrote anatomy and pathology weights (d={cfg.model.d}, seed={cfg.seed}) to {out}")
  return 0

def cmd_infer(args: argparse.Namespace) -> int:
  cfg = resolve_config(args)
  seq, _ = read_dataset(require_dir(args.data, "dataset"))
  weights_dir = require_dir(args.weights, "weights")
  anatomy_w = load_anatomy_weights(weights_dir, cfg.model, cfg.windows.window)
  pathology_w = load_pathology_weights(weights_dir, cfg.model)
  protos = load_prototypes(require_dir(args.stats, "statistics"))

  result = run_inference(seq, anatomy_w, pathology_w, protos, cfg.model, cfg.windows)
  out = prepare_out(args.out)
  save_inference(out, seq.video_id, result)
  write_resolved(out, cfg)
  print(f"video {seq.video_id}: {seq.frames} frames, {len(result.plan)} windows -> {out / 'probs.ten'}")
  return 0
