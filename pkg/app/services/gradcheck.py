import logging
import numpy as np
from typing import Callable, Dict, List, NamedTuple, Optional

from app.config import LossConfig
from app.schemas.labels import NUM_ANATOMY, NUM_PATHOLOGY, GroundTruthTrack
from app.services.losses import LossValue, asl_loss, monotonicity_loss, total_loss
from app.utils.rng import SplitMix64

logger = logging.getLogger(__name__)

STEP = 1e-6
TOLERANCE = 1e-4
TERMS = ("asl", "monotonicity", "total")

class TermResult(NamedTuple):
  term: str
  cases: int
  failures: int
  worst_error: float

class GradcheckReport(NamedTuple):
  seed: int
  cases: int
  results: List[TermResult]

  @property
  def passed(self) -> bool:
    return all(r.failures == 0 for r in self.results)

  @property
  def failing_terms(self) -> List[str]:
    return [r.term for r in self.results if r.failures]

def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
  """Numerical gradient of a scalar function by central differences, one coordinate at a time"""

  x = np.array(x, dtype=np.float64)
  grad = np.zeros_like(x)
  flat = x.reshape(-1)
  out = grad.reshape(-1)
  for i in range(flat.size):
    keep = flat[i]
    flat[i] = keep + step
    up = fn(x)
    flat[i] = keep - step
    down = fn(x)
    flat[i] = keep
    out[i] = (up - down) / (2.0 * step)
  return grad

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
  scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
  if scale < 1e-12:
    return 0.0
  return float(np.linalg.norm(analytic - numeric) / scale)

def random_track(rng: SplitMix64, frames: int) -> GroundTruthTrack:
  """Monotone anatomy with random jumps and sparse random pathology bits"""

  steps = rng.integers(0, 1, frames) * rng.integers(1, 2, frames)
  steps[0] = rng.integers(0, NUM_ANATOMY - 1)
  anatomy = np.minimum(np.cumsum(steps), NUM_ANATOMY - 1)
  pathology = (rng.uniform(frames * NUM_PATHOLOGY) < 0.2).astype(np.uint8).reshape(frames, NUM_PATHOLOGY)
  return GroundTruthTrack(anatomy=anatomy.astype(np.int64), pathology=pathology)

def _check_asl(rng: SplitMix64, cfg: LossConfig, flip: float) -> float:
  T = rng.integers(2, 6)
  C = rng.integers(2, 6)
  logits = (rng.normal(T * C) * 2.0).reshape(T, C)
  targets = (rng.uniform(T * C) < 0.4).astype(np.float64).reshape(T, C)
  frame_w = 1.0 + rng.uniform(T)
  class_w = 1.0 + rng.uniform(C)
  pos_w = 1.0 + 3.0 * rng.uniform(C)

  def value(z: np.ndarray) -> LossValue:
    return asl_loss(z, targets, cfg.gamma_pos, cfg.gamma_neg, cfg.clip, frame_w, class_w, pos_w)

  numeric = central_difference(lambda z: value(z).value, logits)
  return relative_error(flip * value(logits).grad, numeric)

def _check_monotonicity(rng: SplitMix64, cfg: LossConfig, flip: float) -> float:
  T = rng.integers(2, 6)
  logits = (rng.normal(T * NUM_ANATOMY) * 2.0).reshape(T, NUM_ANATOMY)
  numeric = central_difference(lambda z: monotonicity_loss(z).value, logits)
  return relative_error(flip * monotonicity_loss(logits).grad, numeric)

def _check_total(rng: SplitMix64, cfg: LossConfig, flip: float) -> float:
  T = rng.integers(3, 8)
  gt = random_track(rng, T)
  z_a = (rng.normal(T * NUM_ANATOMY) * 2.0).reshape(T, NUM_ANATOMY)
  z_p = (rng.normal(T * NUM_PATHOLOGY) * 2.0).reshape(T, NUM_PATHOLOGY)
  packed = np.concatenate([z_a, z_p], axis=1)

  def value(z: np.ndarray) -> float:
    return total_loss(z[:, :NUM_ANATOMY], z[:, NUM_ANATOMY:], gt, cfg).value

  result = total_loss(z_a, z_p, gt, cfg)
  analytic = np.concatenate([result.anatomy_grad, result.pathology_grad], axis=1)
  return relative_error(flip * analytic, central_difference(value, packed))

CHECKS: Dict[str, Callable[[SplitMix64, LossConfig, float], float]] = {
  "asl": _check_asl,
  "monotonicity": _check_monotonicity,
  "total": _check_total,
}

def run_gradcheck(
  seed: int,
  cases: int = 100,
  cfg: Optional[LossConfig] = None,
  tolerance: float = TOLERANCE,
  flip_sign: Optional[str] = None,
) -> GradcheckReport:
  """
  Compare every analytic loss gradient with central differences on seeded
  random cases. `flip_sign` negates one term's analytic gradient so tests can
  confirm that the harness notices a broken derivative.
  """

  if cases < 1:
    raise ValueError("gradcheck needs at least one case")
  if flip_sign is not None and flip_sign not in CHECKS:
    raise ValueError(f"unknown loss term '{flip_sign}', expected one of {list(CHECKS)}")

  cfg = cfg or LossConfig()
  results = []
  for term, check in CHECKS.items():
    flip = -1.0 if term == flip_sign else 1.0
    rng = SplitMix64(seed, f"gradcheck.{term}")
    errors = [check(rng, cfg, flip) for _ in range(cases)]
    failures = sum(1 for e in errors if not e <= tolerance)
    results.append(TermResult(term, cases, failures, max(errors)))
    if failures:
      logger.warning(f"Gradient check for '{term}' failed on {failures}/{cases} cases (worst rel error {max(errors):.3e})")
    else:
      logger.info(f"Gradient check for '{term}' passed {cases}/{cases} (worst rel error {max(errors):.3e})")

  return GradcheckReport(seed, cases, results)
