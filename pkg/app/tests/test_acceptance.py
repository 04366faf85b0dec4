import time
import pytest
import numpy as np

from app.config import SynthConfig
from app.schemas.labels import GroundTruthTrack
from app.services.datasynth import synth_labels, synth_video
from app.services.evaluation import evaluate_videos, ground_truth_segments
from app.services.pathology_branch import deviation_signal, fit_prototypes
from app.services.postprocess import CoOccurrenceTable, oracle_probabilities, run_pipeline_from_probs
from app.utils.rng import SplitMix64

MIN_LEN = 20

def _runs(mask: np.ndarray):
  padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
  edges = np.flatnonzero(np.diff(padded))
  return list(zip(edges[::2], edges[1::2]))

def _long_segments_only(track: GroundTruthTrack) -> GroundTruthTrack:
  """Fold organ runs shorter than MIN_LEN into the preceding organ and drop short pathology runs"""

  anatomy = track.anatomy.copy()
  for organ in np.unique(anatomy):
    for start, end in _runs(anatomy == organ):
      if end - start < MIN_LEN:
        anatomy[start:end] = anatomy[start - 1] if start > 0 else anatomy[end]
  pathology = track.pathology.copy()
  for p in range(pathology.shape[1]):
    for start, end in _runs(pathology[:, p] == 1):
      if end - start < MIN_LEN:
        pathology[start:end, p] = 0
  return GroundTruthTrack(anatomy=anatomy, pathology=pathology)

@pytest.fixture(scope="module")
def long_video():
  track, _ = synth_labels(SynthConfig(frames=20000, seed=11, cls_dim=4, patch_dim=4))
  track = _long_segments_only(track)
  assert all(e - s + 1 >= MIN_LEN for runs in ground_truth_segments(track).values() for s, e in runs)
  return track

def _score(probs: np.ndarray, track: GroundTruthTrack):
  table = CoOccurrenceTable.fit([track])
  result = run_pipeline_from_probs(probs, table)
  return result, evaluate_videos({"video": result.segments}, {"video": track})

@pytest.mark.integration
def test_oracle_probabilities_reconstruct_ground_truth(long_video):
  result, report = _score(oracle_probabilities(long_video), long_video)
  assert np.array_equal(result.anatomy, long_video.anatomy)
  assert report.averages == {"0.5": 1.0, "0.95": 1.0}
  assert report.overall == 1.0

@pytest.mark.integration
def test_spike_noise_is_absorbed(long_video):
  probs = oracle_probabilities(long_video)
  rng = SplitMix64(11, "spikes")
  frames = rng.integers(0, long_video.frames - 1, long_video.frames // 20)
  classes = rng.integers(0, probs.shape[1] - 1, frames.shape[0])
  probs[frames, classes] = 1.0 - probs[frames, classes]

  _, report = _score(probs, long_video)
  assert report.averages["0.95"] >= 0.95

@pytest.mark.integration
def test_deviation_signal_separates_lesion_frames():
  cfg = SynthConfig(frames=5000, seed=4, noise_sigma=0.1, lesion_magnitude=5.0, cls_dim=16, patch_dim=64)
  video = synth_video(cfg)
  track = video.track
  protos = fit_prototypes([video.features.patch], [track])
  dev = deviation_signal(video.features.patch.astype(np.float64), track.anatomy_onehot(), protos)
  norms = np.linalg.norm(dev, axis=1)
  sick = track.pathology.any(axis=1)
  assert norms[sick].mean() >= 3.0 * norms[~sick].mean()

@pytest.mark.integration
def test_postprocess_and_eval_throughput():
  track, _ = synth_labels(SynthConfig(frames=100000, seed=0, cls_dim=4, patch_dim=4))
  probs = oracle_probabilities(track)
  started = time.perf_counter()
  _score(probs, track)
  # soft floor: 5 s target, fail only beyond twice that
  assert time.perf_counter() - started < 10.0
