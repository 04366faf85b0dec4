"""
Counter-based splitmix64 generator.

Draw i of a stream is splitmix64(key + (i + 1) * GOLDEN), where the key mixes
the seed with a CRC32 of the stream name. Any draw can be replayed from
(seed, stream, counter) alone, independent of platform RNGs.
"""

import zlib
import numpy as np
from typing import Optional

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
TWO_POW_53 = float(1 << 53)

def splitmix64(z: int) -> int:
  z = (z + GOLDEN) & MASK64
  z = ((z ^ (z >> 30)) * MIX1) & MASK64
  z = ((z ^ (z >> 27)) * MIX2) & MASK64
  return z ^ (z >> 31)

def _mix_array(z: np.ndarray) -> np.ndarray:
  z = z ^ (z >> np.uint64(30))
  z = z * np.uint64(MIX1)
  z = z ^ (z >> np.uint64(27))
  z = z * np.uint64(MIX2)
  return z ^ (z >> np.uint64(31))

class SplitMix64:
  def __init__(self, seed: int, stream: str = "default"):
    self.seed = seed & MASK64
    self.stream = stream
    self.key = splitmix64(self.seed ^ zlib.crc32(stream.encode("utf-8")))
    self.counter = 0

  def next_u64(self, n: int) -> np.ndarray:
    """Next `n` raw 64-bit outputs of the stream"""

    counters = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
    self.counter += n
    with np.errstate(over="ignore"):
      z = np.uint64(self.key) + counters * np.uint64(GOLDEN)
      return _mix_array(z)

  def uniform(self, n: Optional[int] = None):
    """Uniform draws in [0, 1) with 53-bit resolution"""

    count = 1 if n is None else n
    values = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) / TWO_POW_53
    return float(values[0]) if n is None else values

  def normal(self, n: Optional[int] = None):
    """Standard normal draws (Box-Muller, two uniforms per draw)"""

    count = 1 if n is None else n
    u = self.uniform(2 * count).reshape(count, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    values = radius * np.cos(2.0 * np.pi * u[:, 1])
    return float(values[0]) if n is None else values

  def integers(self, low: int, high: int, n: Optional[int] = None):
    """Integers in [low, high] inclusive"""

    count = 1 if n is None else n
    span = high - low + 1
    values = low + np.floor(self.uniform(count) * span).astype(np.int64)
    return int(values[0]) if n is None else values

  def exponential(self, scale: float = 1.0) -> float:
    return -scale * float(np.log1p(-self.uniform()))

  def gamma(self, shape: float) -> float:
    """Gamma(shape, 1) by Marsaglia-Tsang rejection"""

    if shape < 1.0:
      # Boost to shape + 1, then scale by U^(1/shape).
      return self.gamma(shape + 1.0) * self.uniform() ** (1.0 / shape)

    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    while True:
      x = self.normal()
      v = (1.0 + c * x) ** 3
      if v <= 0:
        continue
      u = self.uniform()
      if np.log(u + 1e-300) < 0.5 * x * x + d - d * v + d * np.log(v):
        return d * v
