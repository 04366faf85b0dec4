import json
import logging
import argparse
import numpy as np

from app.commands.common import add_common, prepare_out, resolve_config, write_resolved
from app.config import SynthConfig
from app.exceptions import ConfigError, PipelineError
from app.services.datasynth import synth_labels, synth_video
from app.services.evaluation import evaluate_videos
from app.services.gradcheck import TERMS, run_gradcheck
from app.services.inference import run_inference
from app.services.pathology_branch import fit_prototypes
from app.services.postprocess import CoOccurrenceTable, oracle_probabilities, run_pipeline_from_probs
from app.services.weights import init_anatomy_weights, init_pathology_weights
from app.utils.rng import SplitMix64
from app.utils.throughput import ThroughputTimer

logger = logging.getLogger(__name__)

def register(subparsers) -> None:
  grad = subparsers.add_parser("gradcheck", help="verify analytic loss gradients against finite differences")
  add_common(grad, out_required=False)
  grad.add_argument("--cases", type=int, default=100, help="random cases per loss term")
  grad.add_argument("--flip-sign", choices=TERMS, help=argparse.SUPPRESS)
  grad.set_defaults(handler=cmd_gradcheck)

  bench = subparsers.add_parser("bench", help="single-threaded throughput of post-processing and branch forwards")
  add_common(bench, out_required=False)
  bench.add_argument("--frames", type=int, default=100000, help="frames for the post-processing + eval stage")
  bench.add_argument("--forward-frames", type=int, default=20000, help="frames for the branch forward stage (0 skips it)")
  bench.add_argument("--repeats", type=int, default=3, help="timed repetitions per stage")
  bench.set_defaults(handler=cmd_bench)

def cmd_gradcheck(args: argparse.Namespace) -> int:
  if args.cases < 1:
    raise ConfigError(f"--cases must be >= 1, got {args.cases}")
  cfg = resolve_config(args)
  report = run_gradcheck(cfg.seed, args.cases, cfg.loss, flip_sign=args.flip_sign)

  for result in report.results:
    status = "ok" if result.failures == 0 else "FAIL"
    print(f"{result.term:<14}{result.cases - result.failures}/{result.cases} passed  worst rel error {result.worst_error:.3e}  {status}")
  if args.out:
    out = prepare_out(args.out)
    (out / "gradcheck.json").write_text(json.dumps([r._asdict() for r in report.results], indent=2) + "\n", encoding="utf-8")
    write_resolved(out, cfg)
  if not report.passed:
    raise PipelineError(f"analytic gradient mismatch in: {', '.join(report.failing_terms)}", code="gradcheck")
  return 0

def _noisy_oracle(track, seed: int) -> np.ndarray:
  """Oracle probabilities with 5% of frames carrying one flipped class"""

  probs = oracle_probabilities(track)
  rng = SplitMix64(seed, "bench_spikes")
  frames = rng.integers(0, track.frames - 1, max(1, track.frames // 20))
  classes = rng.integers(0, probs.shape[1] - 1, frames.shape[0])
  probs[frames, classes] = 1.0 - probs[frames, classes]
  return probs

def cmd_bench(args: argparse.Namespace) -> int:
  if args.repeats < 1 or args.frames < 8:
    raise ConfigError("bench needs --repeats >= 1 and --frames >= 8")
  cfg = resolve_config(args)
  stats = []

  track, _ = synth_labels(SynthConfig(frames=args.frames, seed=cfg.seed))
  probs = _noisy_oracle(track, cfg.seed)
  table = CoOccurrenceTable.fit([track])

  def postprocess_and_eval():
    result = run_pipeline_from_probs(probs, table, cfg.postprocess, cfg.viterbi)
    return evaluate_videos({"bench": result.segments}, {"bench": track}, cfg.thresholds)

  post_timer = ThroughputTimer("postprocess+eval", args.frames)
  post_timer.run(postprocess_and_eval, args.repeats)
  stats.append(post_timer.get_stats())

  if args.forward_frames > 0:
    dims = cfg.model
    synth = SynthConfig(frames=args.forward_frames, seed=cfg.seed, cls_dim=dims.cls_dim, patch_dim=dims.patch_dim)
    video = synth_video(synth)
    protos = fit_prototypes([video.features.patch], [video.track])
    anatomy_w = init_anatomy_weights(dims, cfg.windows.window, cfg.seed)
    pathology_w = init_pathology_weights(dims, cfg.seed)

    forward_timer = ThroughputTimer(f"forward d={dims.d}", args.forward_frames)
    forward_timer.run(lambda: run_inference(video.features, anatomy_w, pathology_w, protos, dims, cfg.windows), args.repeats)
    stats.append(forward_timer.get_stats())

  for entry in stats:
    note = "stable" if entry["stable"] else "unstable (spread >= 20%)"
    print(
      f"{entry['stage']:<22}{entry['frames']:>8} frames  best {entry['best_seconds']:.3f}s  "
      f"median {entry['median_seconds']:.3f}s  {entry['frames_per_second']:.1f} frames/s  {note}"
    )
  if args.out:
    out = prepare_out(args.out)
    (out / "bench.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    write_resolved(out, cfg)
  return 0
