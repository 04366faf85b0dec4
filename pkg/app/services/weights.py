import json
import logging
import numpy as np
from pathlib import Path
from dataclasses import fields, is_dataclass
from typing import Any, Dict, Tuple

from app.config import ModelDims
from app.exceptions import ManifestError, TensorFileError
from app.services.anatomy_branch import AnatomyWeights, Draw, build_anatomy_weights
from app.services.pathology_branch import PathologyWeights, build_pathology_weights
from app.utils.rng import SplitMix64
from app.utils.tensorio import load_tensor, save_tensor

logger = logging.getLogger(__name__)

def xavier_draw(seed: int, dtype=np.float32) -> Draw:
  """Xavier-uniform matrices; biases 0, norms 1, SSM decays -(1..S), skips 1"""

  def draw(name: str, shape: Tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "weight":
      fan_in, fan_out = shape
      limit = np.sqrt(6.0 / (fan_in + fan_out))
      values = SplitMix64(seed, name).uniform(fan_in * fan_out) * 2.0 - 1.0
      return (values * limit).reshape(shape).astype(dtype)
    if kind == "embed":
      return (SplitMix64(seed, name).normal(int(np.prod(shape))) * 0.02).reshape(shape).astype(dtype)
    if kind == "decay":
      d, state = shape
      return -np.tile(np.arange(1, state + 1, dtype=dtype), (d, 1))
    if kind == "dt_bias":
      # softplus(-4.6) ~ 0.01
      return np.full(shape, -4.6, dtype=dtype)
    if kind in ("gamma", "skip"):
      return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)

  return draw

def zeros_draw(dtype=np.float32) -> Draw:
  """All-zero parameters; SSM decays stay at -1 so the loaded weights remain a valid scan"""

  def draw(name: str, shape: Tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "decay":
      return np.full(shape, -1.0, dtype=dtype)
    return np.zeros(shape, dtype=dtype)

  return draw

def init_anatomy_weights(dims: ModelDims, window: int, seed: int) -> AnatomyWeights:
  return build_anatomy_weights(xavier_draw(seed ^ 0xA7A7), dims, window)

def init_pathology_weights(dims: ModelDims, seed: int) -> PathologyWeights:
  return build_pathology_weights(xavier_draw(seed ^ 0x9A7B), dims)

def named_tensors(obj: Any, prefix: str = "") -> Dict[str, np.ndarray]:
  """Flatten a weight dataclass into dotted parameter names"""

  out: Dict[str, np.ndarray] = {}
  if isinstance(obj, np.ndarray):
    out[prefix] = obj
  elif is_dataclass(obj):
    for f in fields(obj):
      out.update(named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
  elif isinstance(obj, (tuple, list)):
    for i, item in enumerate(obj):
      out.update(named_tensors(item, f"{prefix}.{i}"))
  else:
    raise TypeError(f"cannot flatten {type(obj).__name__} at '{prefix}'")
  return out

def save_weights(directory, branch: str, weights: Any) -> Path:
  """Write one TensorFile per parameter plus `<branch>.json` mapping name -> path + shape"""

  directory = Path(directory)
  tensors = named_tensors(weights)
  manifest = {}
  for name, tensor in tensors.items():
    rel = Path(branch) / f"{name}.ten"
    save_tensor(directory / rel, tensor)
    manifest[name] = {"path": rel.as_posix(), "shape": list(tensor.shape)}

  manifest_path = directory / f"{branch}.json"
  manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
  logger.info(f"Saved {len(tensors)} {branch} tensors to {directory}")
  return manifest_path

def _manifest_draw(directory: Path, branch: str) -> Draw:
  manifest_path = directory / f"{branch}.json"
  if not manifest_path.exists():
    raise ManifestError(f"missing weight manifest {manifest_path}", code="missing_file")
  manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
  used = set()

  def draw(name: str, shape: Tuple[int, ...], kind: str) -> np.ndarray:
    entry = manifest.get(name)
    if entry is None:
      raise ManifestError(f"{branch}.json has no entry for '{name}'")
    if tuple(entry["shape"]) != tuple(shape):
      raise ManifestError(f"{branch}.{name}: manifest shape {entry['shape']} but configuration expects {list(shape)}")
    try:
      tensor = load_tensor(directory / entry["path"])
    except TensorFileError as e:
      raise ManifestError(f"{branch}.{name}: {e}") from e
    if tensor.shape != tuple(shape):
      raise ManifestError(f"{branch}.{name}: file holds {tensor.shape}, expected {tuple(shape)}")
    if not np.isfinite(tensor).all():
      raise ManifestError(f"{branch}.{name}: tensor holds NaN or Inf")
    if kind == "decay" and not (tensor < 0).all():
      raise ManifestError(f"{branch}.{name}: SSM decay entries must be negative")
    used.add(name)
    return tensor

  draw.unused = lambda: sorted(set(manifest) - used)
  return draw

def load_anatomy_weights(directory, dims: ModelDims, window: int) -> AnatomyWeights:
  draw = _manifest_draw(Path(directory), "anatomy")
  weights = build_anatomy_weights(draw, dims, window)
  if draw.unused():
    raise ManifestError(f"anatomy.json lists parameters the configuration does not use: {draw.unused()[:5]}")
  return weights

def load_pathology_weights(directory, dims: ModelDims) -> PathologyWeights:
  draw = _manifest_draw(Path(directory), "pathology")
  weights = build_pathology_weights(draw, dims)
  if draw.unused():
    raise ManifestError(f"pathology.json lists parameters the configuration does not use: {draw.unused()[:5]}")
  return weights
