import time
import logging
import numpy as np
from functools import wraps
from typing import Any, Callable, Dict, List

logger = logging.getLogger(__name__)

class ThroughputTimer:
  def __init__(self, stage: str, frames: int):
    self.stage = stage
    self.frames = frames
    self.durations: List[float] = []

    logger.info(f"Throughput timer initialized: {stage} over {frames} frames")

  def timed(self, func: Callable) -> Callable:
    """Decorator recording the wall-clock time of every call"""
    @wraps(func)
    def wrapper(*args, **kwargs) -> Any:
      start_time = time.perf_counter()
      try:
        return func(*args, **kwargs)
      except Exception as e:
        logger.error(f"{self.stage} failed: {type(e).__name__}: {str(e)}")
        raise
      finally:
        elapsed = time.perf_counter() - start_time
        self.durations.append(elapsed)
        logger.debug(f"{self.stage} run #{len(self.durations)} took {elapsed:.3f}s")

    return wrapper

  def run(self, func: Callable, repeats: int = 3) -> Any:
    if repeats < 1:
      raise ValueError("repeats must be >= 1")
    timed = self.timed(func)
    result = None
    for _ in range(repeats):
      result = timed()
    return result

  @property
  def spread(self) -> float:
    """(max - min) / median over the recorded runs"""

    if len(self.durations) < 2:
      return 0.0
    median = float(np.median(self.durations))
    return (max(self.durations) - min(self.durations)) / median if median > 0 else 0.0

  def get_stats(self) -> Dict[str, Any]:
    if not self.durations:
      return {"stage": self.stage, "frames": self.frames, "runs": 0}
    best = min(self.durations)
    return {
      "stage": self.stage,
      "frames": self.frames,
      "runs": len(self.durations),
      "best_seconds": round(best, 4),
      "median_seconds": round(float(np.median(self.durations)), 4),
      "frames_per_second": round(self.frames / best, 1) if best > 0 else float("inf"),
      "spread": round(self.spread, 3),
      "stable": self.spread < 0.2,
    }
