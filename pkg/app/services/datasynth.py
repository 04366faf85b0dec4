import csv
import json
import logging
import numpy as np
from pathlib import Path
from typing import List, NamedTuple, Tuple
from pydantic import BaseModel, ConfigDict

from app.config import SynthConfig
from app.exceptions import DatasetError, LabelError
from app.schemas.labels import NUM_ANATOMY, NUM_PATHOLOGY, FeatureSequence, GroundTruthTrack
from app.utils.rng import SplitMix64
from app.utils.tensorio import load_tensor, matmul, save_tensor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LABEL_HEADER = ["frame", "anatomy_index"] + [f"p{i}" for i in range(NUM_PATHOLOGY)]

class Burst(NamedTuple):
  pathology: int
  start: int
  end: int

class DatasetMeta(BaseModel):
  video_id: str
  frames: int
  seed: int = 0
  format_version: int = FORMAT_VERSION

class SyntheticVideo(BaseModel):
  model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

  features: FeatureSequence
  track: GroundTruthTrack
  prototypes: np.ndarray
  lesion_offsets: np.ndarray
  bursts: List[Burst]

def burst_arrivals(seed: int, frames: int, rate: float) -> List[int]:
  """Burst onsets of a Poisson process with `rate` bursts per 1000 frames"""

  if rate <= 0:
    return []
  rng = SplitMix64(seed, "burst_gaps")
  scale = 1000.0 / rate
  onsets = []
  position = rng.exponential(scale)
  while position < frames:
    onsets.append(int(position))
    position += rng.exponential(scale)
  return onsets

def organ_durations(seed: int, frames: int, concentration: float) -> np.ndarray:
  """Dirichlet-like split of `frames` into 8 organ durations, each >= 1"""

  if frames < NUM_ANATOMY:
    raise DatasetError(f"{frames} frames cannot give each of the {NUM_ANATOMY} organs a frame")
  rng = SplitMix64(seed, "organ_durations")
  draws = np.array([rng.gamma(concentration) for _ in range(NUM_ANATOMY)])
  fractions = draws / draws.sum()
  spare = frames - NUM_ANATOMY
  durations = 1 + np.floor(fractions * spare).astype(np.int64)
  durations[-1] += frames - durations.sum()
  return durations

def synth_labels(cfg: SynthConfig) -> Tuple[GroundTruthTrack, List[Burst]]:
  """Monotone organ track plus Poisson pathology bursts, without features"""

  T = cfg.frames
  seed = cfg.seed
  durations = organ_durations(seed, T, cfg.concentration)
  anatomy = np.repeat(np.arange(NUM_ANATOMY, dtype=np.int64), durations)
  mouth_end = int(durations[0])

  pathology = np.zeros((T, NUM_PATHOLOGY), dtype=np.uint8)
  bursts: List[Burst] = []
  shape_rng = SplitMix64(seed, "burst_shapes")
  for onset in burst_arrivals(seed, T, cfg.burst_rate):
    length = shape_rng.integers(cfg.burst_min, cfg.burst_max)
    cls = shape_rng.integers(0, NUM_PATHOLOGY - 1)
    # Bursts may cross organ boundaries but never touch the mouth.
    start = max(onset, mouth_end)
    end = min(start + length, T) - 1
    pathology[start:end + 1, cls] = 1
    bursts.append(Burst(cls, start, end))

  logger.debug(f"Organ durations {durations.tolist()}, {len(bursts)} bursts")
  return GroundTruthTrack(anatomy=anatomy, pathology=pathology), bursts

def synth_video(cfg: SynthConfig, video_id: str = None) -> SyntheticVideo:
  """Generate one Galar-like video from planted organ prototypes and lesion offsets"""

  T = cfg.frames
  seed = cfg.seed
  video_id = video_id or f"synth_{seed:05d}"
  logger.info(f"Synthesizing {video_id}: {T} frames, seed {seed}")

  track, bursts = synth_labels(cfg)
  anatomy = track.anatomy
  pathology = track.pathology

  prototypes = SplitMix64(seed, "prototypes").normal(NUM_ANATOMY * cfg.patch_dim)
  prototypes = prototypes.reshape(NUM_ANATOMY, cfg.patch_dim).astype(np.float32)

  directions = SplitMix64(seed, "lesions").normal(NUM_PATHOLOGY * cfg.patch_dim).reshape(NUM_PATHOLOGY, cfg.patch_dim)
  directions /= np.linalg.norm(directions, axis=1, keepdims=True)
  lesion_offsets = (directions * cfg.lesion_magnitude).astype(np.float32)

  sigma = np.float32(cfg.noise_sigma)
  clean = prototypes[anatomy]
  if bursts:
    clean = clean + matmul(pathology.astype(np.float32), lesion_offsets)
  patch = clean + sigma * SplitMix64(seed, "patch_noise").normal(T * cfg.patch_dim).reshape(T, cfg.patch_dim).astype(np.float32)

  # CLS view: fixed random map of the noise-free patch signal, organ bias, own noise.
  cls_map = SplitMix64(seed, "cls_map").normal(cfg.patch_dim * cfg.cls_dim).reshape(cfg.patch_dim, cfg.cls_dim)
  cls_map = (cls_map / np.sqrt(cfg.patch_dim)).astype(np.float32)
  organ_bias = SplitMix64(seed, "organ_bias").normal(NUM_ANATOMY * cfg.cls_dim).reshape(NUM_ANATOMY, cfg.cls_dim).astype(np.float32)
  mapped_protos = matmul(prototypes, cls_map) + organ_bias
  cls = mapped_protos[anatomy]
  if bursts:
    cls = cls + matmul(pathology.astype(np.float32), matmul(lesion_offsets, cls_map))
  cls = cls + sigma * SplitMix64(seed, "cls_noise").normal(T * cfg.cls_dim).reshape(T, cfg.cls_dim).astype(np.float32)

  logger.info(f"Synthesized {video_id}: {len(bursts)} bursts")
  return SyntheticVideo(
    features=FeatureSequence(video_id=video_id, cls=cls.astype(np.float32), patch=patch.astype(np.float32)),
    track=track,
    prototypes=prototypes,
    lesion_offsets=lesion_offsets,
    bursts=bursts
  )

def write_dataset(directory, seq: FeatureSequence, gt: GroundTruthTrack, seed: int = 0) -> Path:
  directory = Path(directory)
  if seq.frames != gt.frames:
    raise DatasetError(f"features have {seq.frames} frames but labels have {gt.frames}")
  try:
    directory.mkdir(parents=True, exist_ok=True)
  except OSError as e:
    raise DatasetError(f"cannot create dataset directory {directory}: {e}") from e

  save_tensor(directory / "cls.ten", seq.cls)
  save_tensor(directory / "patch.ten", seq.patch)

  with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(LABEL_HEADER)
    for t in range(gt.frames):
      writer.writerow([t, int(gt.anatomy[t])] + [int(v) for v in gt.pathology[t]])

  meta = DatasetMeta(video_id=seq.video_id, frames=seq.frames, seed=seed)
  (directory / "meta.json").write_text(json.dumps(meta.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
  logger.info(f"Wrote dataset {seq.video_id} ({seq.frames} frames) to {directory}")
  return directory

def read_labels(path) -> GroundTruthTrack:
  path = Path(path)
  if not path.exists():
    raise DatasetError(f"missing label file {path}", code="missing_file")

  anatomy: List[int] = []
  pathology: List[List[int]] = []
  with open(path, newline="", encoding="utf-8") as fh:
    for line_no, row in enumerate(csv.reader(fh), start=1):
      if not row:
        continue
      if line_no == 1 and not row[0].strip().lstrip("-").isdigit():
        continue
      if len(row) != 2 + NUM_PATHOLOGY:
        raise LabelError(f"{path}:{line_no}: expected {2 + NUM_PATHOLOGY} columns, got {len(row)}")
      try:
        values = [int(v) for v in row]
      except ValueError:
        raise LabelError(f"{path}:{line_no}: non-integer label") from None
      if values[0] != len(anatomy):
        raise LabelError(f"{path}:{line_no}: frame index {values[0]} out of sequence")
      anatomy.append(values[1])
      pathology.append(values[2:])

  return GroundTruthTrack(
    anatomy=np.array(anatomy, dtype=np.int64),
    pathology=np.array(pathology, dtype=np.uint8).reshape(len(anatomy), NUM_PATHOLOGY)
  )

def read_meta(directory) -> DatasetMeta:
  directory = Path(directory)
  meta_path = directory / "meta.json"
  if meta_path.exists():
    return DatasetMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))
  logger.warning(f"No meta.json in {directory}; using the directory name as video id")
  return DatasetMeta(video_id=directory.name, frames=-1)

def read_dataset(directory) -> Tuple[FeatureSequence, GroundTruthTrack]:
  directory = Path(directory)
  for name in ("cls.ten", "patch.ten", "labels.csv"):
    if not (directory / name).exists():
      raise DatasetError(f"missing file {directory / name}", code="missing_file")

  meta = read_meta(directory)
  seq = FeatureSequence(video_id=meta.video_id, cls=load_tensor(directory / "cls.ten"), patch=load_tensor(directory / "patch.ten"))
  gt = read_labels(directory / "labels.csv")
  if gt.frames != seq.frames:
    raise DatasetError(f"labels.csv has {gt.frames} rows but features have {seq.frames} frames", code="row_mismatch")
  logger.info(f"Read dataset {meta.video_id}: {seq.frames} frames from {directory}")
  return seq, gt

def window_plan(frames: int, window: int, stride: int) -> List[Tuple[int, int]]:
  """Half-open windows of length `window` every `stride` frames, plus a tail window ending at `frames`"""

  if frames <= 0:
    raise DatasetError("cannot plan windows over an empty video")
  if window < 1 or stride < 1:
    raise ValueError("window and stride must be >= 1")
  if stride > window:
    raise ValueError(f"stride={stride} larger than window={window} leaves frames uncovered")

  if frames <= window:
    return [(0, frames)]

  plan = []
  start = 0
  while start + window < frames:
    plan.append((start, start + window))
    start += stride
  if plan[-1][1] < frames:
    plan.append((frames - window, frames))
  return plan
