import itertools
import pytest
import numpy as np

from app.config import PostprocessConfig, SynthConfig, ViterbiConfig
from app.exceptions import SegmentError, ShapeError, StatisticsError
from app.schemas.labels import NUM_ANATOMY, NUM_CLASSES, NUM_PATHOLOGY, GroundTruthTrack, anatomy_index, pathology_index
from app.schemas.segments import SegmentPrediction
from app.services.datasynth import synth_labels
from app.services.postprocess import (
  CoOccurrenceTable, anatomy_gap_fill, cooccurrence_gate, extract_segments, median_filter, merge_windows,
  min_segment_filter, run_pipeline, run_pipeline_from_probs, skip_transitions, viterbi_anatomy, viterbi_decode,
)
from app.utils.rng import SplitMix64
from app.utils.tensorio import sigmoid

def _seg(cls, start, end, confidence=1.0):
  return SegmentPrediction(class_id=cls, start=start, end=end, confidence=confidence)

def _full_table() -> CoOccurrenceTable:
  return CoOccurrenceTable(counts=np.ones((NUM_ANATOMY, NUM_PATHOLOGY), dtype=np.int64), frames=np.ones(NUM_ANATOMY, dtype=np.int64))

def test_merge_single_window_is_sigmoid(random_matrix):
  logits = random_matrix(6, NUM_CLASSES)
  assert np.array_equal(merge_windows([logits], [(0, 6)], 6), sigmoid(logits))

def test_merge_averages_probabilities():
  p = lambda v: np.full((1, NUM_CLASSES), np.log(v / (1.0 - v)))
  merged = merge_windows([p(0.2), p(0.8)], [(0, 1), (0, 1)], 1)
  assert np.allclose(merged, 0.5)

def test_merge_matches_coverage_oracle(random_matrix):
  a, b = random_matrix(4, NUM_CLASSES), random_matrix(4, NUM_CLASSES)
  merged = merge_windows([a, b], [(0, 4), (2, 6)], 6)
  coverage = np.zeros(6)
  total = np.zeros((6, NUM_CLASSES))
  for logits, (start, end) in ((a, (0, 4)), (b, (2, 6))):
    coverage[start:end] += 1
    total[start:end] += 1.0 / (1.0 + np.exp(-logits))
  assert coverage.tolist() == [1, 1, 2, 2, 1, 1]
  assert np.allclose(merged, total / coverage[:, None], rtol=1e-12)
  assert merged.min() >= 0.0 and merged.max() <= 1.0

def test_merge_rejects_uncovered_frames(random_matrix):
  with pytest.raises(ShapeError) as exc:
    merge_windows([random_matrix(3, NUM_CLASSES)], [(0, 3)], 5)
  assert exc.value.code == "uncovered"

def test_median_cases():
  assert np.array_equal(median_filter(np.full(9, 0.3)), np.full(9, 0.3))
  assert median_filter(np.array([0.0, 0.0, 1.0, 0.0, 0.0])).tolist() == [0.0] * 5
  # edge windows shrink: t=0 sees [0.0, 1.0, 1.0]
  assert median_filter(np.array([0.0, 1.0, 1.0, 0.0, 0.0, 0.0]))[0] == 1.0

def test_median_matches_sort_oracle(rng):
  column = rng.uniform(20)
  out = median_filter(column, 5)
  for t in range(20):
    window = sorted(column[max(0, t - 2):min(20, t + 3)])
    n = len(window)
    oracle = window[n // 2] if n % 2 else (window[n // 2 - 1] + window[n // 2]) / 2
    assert out[t] == oracle

def test_median_is_idempotent_on_long_runs(rng):
  for _ in range(100):
    runs = rng.integers(1, 6)
    column = np.concatenate([np.full(rng.integers(3, 8), rng.uniform()) for _ in range(runs)])
    assert np.array_equal(median_filter(column, 5), column)

def test_median_filters_columns_independently(random_matrix):
  probs = random_matrix(12, 3)
  out = median_filter(probs)
  for c in range(3):
    assert np.array_equal(out[:, c], median_filter(probs[:, c]))

def test_median_rejects_even_kernel():
  with pytest.raises(ValueError):
    median_filter(np.zeros(5), 4)

def test_viterbi_follows_one_hot_path():
  path = [0, 0, 1, 2, 2, 3, 4, 4, 5, 6, 7]
  probs = np.eye(NUM_ANATOMY)[path]
  assert viterbi_anatomy(probs).tolist() == path

def test_viterbi_single_frame_ties_to_smallest_state():
  assert viterbi_anatomy(np.full((1, NUM_ANATOMY), 0.125)).tolist() == [0]
  probs = np.zeros((1, NUM_ANATOMY))
  probs[0, 4] = probs[0, 6] = 0.5
  assert viterbi_anatomy(probs).tolist() == [4]

def test_viterbi_rejects_empty_input():
  with pytest.raises(ShapeError):
    viterbi_anatomy(np.zeros((0, NUM_ANATOMY)))

def _brute_force(log_em: np.ndarray, trans: np.ndarray):
  T, S = log_em.shape
  best_score, best_paths = -np.inf, []
  for path in itertools.combinations_with_replacement(range(S), T):
    # combinations_with_replacement yields exactly the non-decreasing paths
    score = log_em[0, path[0]]
    for t in range(1, T):
      score = score + trans[path[t - 1], path[t]] + log_em[t, path[t]]
    if score > best_score:
      best_score, best_paths = score, [path]
    elif score == best_score:
      best_paths.append(path)
  return best_score, best_paths

def test_viterbi_matches_exhaustive_enumeration():
  rng = SplitMix64(17, "viterbi_oracle")
  cfg = ViterbiConfig(skip_penalty=5.0)
  trans = skip_transitions(NUM_ANATOMY, cfg.skip_penalty)
  for _ in range(200):
    T = rng.integers(1, 6)
    probs = rng.uniform(T * NUM_ANATOMY).reshape(T, NUM_ANATOMY)
    log_em = np.log(np.maximum(probs, cfg.emission_floor))
    path, score = viterbi_decode(log_em, trans)
    best_score, best_paths = _brute_force(log_em, trans)
    assert score == pytest.approx(best_score, rel=0, abs=1e-12)
    assert tuple(path.tolist()) in best_paths

def test_viterbi_output_is_monotone(rng):
  for _ in range(100):
    T = rng.integers(1, 40)
    probs = rng.uniform(T * NUM_ANATOMY).reshape(T, NUM_ANATOMY)
    path = viterbi_anatomy(probs, ViterbiConfig(skip_penalty=rng.uniform() * 3))
    assert np.all(np.diff(path) >= 0)

def test_gate_zeroes_unseen_pairs():
  counts = np.ones((NUM_ANATOMY, NUM_PATHOLOGY), dtype=np.int64)
  counts[anatomy_index("mouth"), pathology_index("polyp")] = 0
  table = CoOccurrenceTable(counts=counts, frames=np.ones(NUM_ANATOMY, dtype=np.int64))
  probs = np.full((4, NUM_CLASSES), 0.7)
  anatomy = np.array([0, 0, 3, 3])
  gated = cooccurrence_gate(probs, anatomy, table)
  polyp = NUM_ANATOMY + pathology_index("polyp")
  assert gated[:2, polyp].tolist() == [0.0, 0.0]
  assert gated[2:, polyp].tolist() == [0.7, 0.7]
  assert np.array_equal(gated[:, :NUM_ANATOMY], np.eye(NUM_ANATOMY)[anatomy])

def test_gate_permissive_table_keeps_pathology(random_matrix):
  probs = 1.0 / (1.0 + np.exp(-random_matrix(5, NUM_CLASSES)))
  gated = cooccurrence_gate(probs, np.zeros(5, dtype=np.int64), _full_table())
  assert np.array_equal(gated[:, NUM_ANATOMY:], probs[:, NUM_ANATOMY:])

def test_gate_matches_lookup_oracle_and_never_increases():
  tracks = [synth_labels(SynthConfig(frames=2000, seed=s, burst_rate=3.0, cls_dim=4, patch_dim=4))[0] for s in range(3)]
  table = CoOccurrenceTable.fit(tracks)
  rng = SplitMix64(8, "gate")
  probs = rng.uniform(500 * NUM_CLASSES).reshape(500, NUM_CLASSES)
  anatomy = np.sort(rng.integers(0, NUM_ANATOMY - 1, 500))
  gated = cooccurrence_gate(probs, anatomy, table)
  for t in range(500):
    for p in range(NUM_PATHOLOGY):
      expected = probs[t, NUM_ANATOMY + p] if table.counts[anatomy[t], p] >= 1 else 0.0
      assert gated[t, NUM_ANATOMY + p] == expected
  assert np.all(gated[:, NUM_ANATOMY:] <= probs[:, NUM_ANATOMY:])

def test_gate_requires_fitted_table():
  empty = CoOccurrenceTable(counts=np.zeros((NUM_ANATOMY, NUM_PATHOLOGY), dtype=np.int64), frames=np.zeros(NUM_ANATOMY, dtype=np.int64))
  with pytest.raises(StatisticsError) as exc:
    cooccurrence_gate(np.zeros((1, NUM_CLASSES)), np.zeros(1, dtype=np.int64), empty)
  assert exc.value.code == "unfitted"

def test_table_fit_and_csv_round_trip(tmp_path):
  pathology = np.zeros((4, NUM_PATHOLOGY), dtype=np.uint8)
  pathology[2:, 1] = 1
  track = GroundTruthTrack(anatomy=np.array([0, 0, 5, 5]), pathology=pathology)
  table = CoOccurrenceTable.fit([track])
  assert table.counts[5, 1] == 2 and table.counts.sum() == 2
  assert table.frames.tolist() == [2, 0, 0, 0, 0, 2, 0, 0]

  path = tmp_path / "cooccur.csv"
  table.save_csv(path)
  assert path.read_text().splitlines()[0].startswith("frames,active bleeding")
  loaded = CoOccurrenceTable.load_csv(path)
  assert np.array_equal(loaded.counts, table.counts)
  assert np.array_equal(loaded.frames, table.frames)

def test_table_rejects_malformed_csv(tmp_path):
  path = tmp_path / "cooccur.csv"
  path.write_text("1,2,3\n")
  with pytest.raises(StatisticsError):
    CoOccurrenceTable.load_csv(path)

def test_extract_segments_cases():
  assert extract_segments(np.full(6, 0.2)) == []
  [seg] = extract_segments(np.full(5, 0.9), class_id=9)
  assert (seg.class_id, seg.start, seg.end) == (9, 0, 4)
  assert seg.confidence == pytest.approx(0.9)

  first, second = extract_segments(np.array([0.6, 0.4, 0.7, 0.7]), 0.5)
  assert (first.start, first.end, first.confidence) == (0, 0, pytest.approx(0.6))
  assert (second.start, second.end, second.confidence) == (2, 3, pytest.approx(0.7))

def test_min_segment_filter_cases():
  assert min_segment_filter([_seg(8, 0, 18)]) == []
  assert len(min_segment_filter([_seg(8, 0, 19)])) == 1
  kept = min_segment_filter([_seg(8, 0, 4), _seg(8, 10, 29), _seg(8, 40, 139)])
  assert [s.length for s in kept] == [20, 100]
  assert min_segment_filter(kept) == kept

def test_gap_fill_cases():
  [merged] = anatomy_gap_fill([_seg(5, 0, 100, 0.8), _seg(5, 110, 200, 0.6)])
  assert (merged.start, merged.end) == (0, 200)
  assert merged.confidence == pytest.approx((0.8 * 101 + 0.6 * 91) / 192)

  apart = [_seg(5, 0, 100), _seg(5, 122, 200)]
  assert anatomy_gap_fill(apart) == apart

  alternating = [_seg(1, 0, 30), _seg(2, 35, 60), _seg(1, 65, 90)]
  assert anatomy_gap_fill(alternating) == alternating

def test_gap_fill_rejects_overlap():
  with pytest.raises(SegmentError):
    anatomy_gap_fill([_seg(1, 0, 30), _seg(1, 30, 60)])

def test_pipeline_zero_logits():
  plan = [(0, 40), (20, 60)]
  logits = [np.zeros((40, NUM_CLASSES)), np.zeros((40, NUM_CLASSES))]
  result = run_pipeline(logits, plan, 60, _full_table())
  assert result.anatomy.tolist() == [0] * 60
  assert [(s.class_id, s.start, s.end) for s in result.segments] == [(0, 0, 59)]

def test_pipeline_is_deterministic_and_monotone(rng):
  probs = rng.uniform(300 * NUM_CLASSES).reshape(300, NUM_CLASSES)
  table = _full_table()
  a = run_pipeline_from_probs(probs, table)
  b = run_pipeline_from_probs(probs, table)
  assert a.segments == b.segments
  assert np.array_equal(a.probs, b.probs)

  anatomy = sorted((s for s in a.segments if s.class_id < NUM_ANATOMY), key=lambda s: s.start)
  assert all(x.class_id <= y.class_id for x, y in zip(anatomy, anatomy[1:]))
  assert all(s.length >= 20 for s in a.segments)

def test_pipeline_rejects_out_of_range_probabilities():
  with pytest.raises(ValueError):
    run_pipeline_from_probs(np.full((5, NUM_CLASSES), 1.5), _full_table(), PostprocessConfig())
