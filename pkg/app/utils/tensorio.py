"""
Dense kernels and the TensorFile format shared by every stage.

Matrices are plain 2-D numpy arrays. Storage is float32; every kernel takes
an optional `dtype` so gradient checks and oracles can run in float64.
Products accumulate over the inner index in ascending order, so a result is
bit-identical to the naive triple loop evaluated in the same dtype.
"""

import struct
import logging
import numpy as np
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

from app.exceptions import NonFiniteError, ShapeError, TensorFileError

logger = logging.getLogger(__name__)

MAGIC = b"GTNV2TEN"
MAX_NDIM = 4
MAX_ELEMENTS = 1 << 40

DTYPE_CODES = {
  0: np.dtype("<f4"),
  1: np.dtype("<f8"),
  2: np.dtype("u1"),
}
CODE_FOR_DTYPE = {np.dtype(v).newbyteorder("=").str: k for k, v in DTYPE_CODES.items()}

GELU_COEF = np.sqrt(2.0 / np.pi)

Layer = Tuple[np.ndarray, np.ndarray]

def _as_matrix(x: np.ndarray, name: str, dtype=None) -> np.ndarray:
  arr = np.asarray(x, dtype=dtype)
  if arr.ndim != 2:
    raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
  return arr

def _result_dtype(a: np.ndarray, b: np.ndarray, dtype) -> np.dtype:
  if dtype is not None:
    return np.dtype(dtype)
  if a.dtype == np.float64 or b.dtype == np.float64:
    return np.dtype(np.float64)
  return np.dtype(np.float32)

def ensure_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
  if not np.isfinite(m).all():
    raise NonFiniteError(f"{what} contains NaN or Inf")
  return m

def matmul(a: np.ndarray, b: np.ndarray, dtype=None) -> np.ndarray:
  """Matrix product accumulated in ascending inner-index order"""

  a = _as_matrix(a, "left operand")
  b = _as_matrix(b, "right operand")
  if a.shape[1] != b.shape[0]:
    raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

  out_dtype = _result_dtype(a, b, dtype)
  a = a.astype(out_dtype, copy=False)
  b = b.astype(out_dtype, copy=False)

  out = np.zeros((a.shape[0], b.shape[1]), dtype=out_dtype)
  for k in range(a.shape[1]):
    out += a[:, k:k + 1] * b[k:k + 1, :]
  return out

def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None, dtype=None) -> np.ndarray:
  out = matmul(x, weight, dtype=dtype)
  if bias is not None:
    if bias.shape != (weight.shape[1],):
      raise ShapeError(f"bias shape {bias.shape} does not match output width {weight.shape[1]}")
    out = out + bias.astype(out.dtype, copy=False)
  return out

def row_softmax(m: np.ndarray, dtype=None) -> np.ndarray:
  m = _as_matrix(m, "softmax input", dtype=dtype)
  ensure_finite(m, "softmax input")
  shifted = m - m.max(axis=1, keepdims=True)
  e = np.exp(shifted)
  return e / e.sum(axis=1, keepdims=True)

def sigmoid(x: np.ndarray, dtype=None) -> np.ndarray:
  x = np.asarray(x, dtype=dtype)
  if not np.issubdtype(x.dtype, np.floating):
    x = x.astype(np.float64)
  out = np.empty_like(x)
  pos = x >= 0
  out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
  ex = np.exp(x[~pos])
  out[~pos] = ex / (1.0 + ex)
  return out

def softplus(x: np.ndarray) -> np.ndarray:
  return np.logaddexp(np.zeros((), dtype=x.dtype), x)

def gelu(x: np.ndarray) -> np.ndarray:
  """GELU, tanh approximation"""

  c = x.dtype.type(GELU_COEF) if np.issubdtype(x.dtype, np.floating) else GELU_COEF
  return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x * x * x)))

def silu(x: np.ndarray) -> np.ndarray:
  return x * sigmoid(x)

def relu(x: np.ndarray) -> np.ndarray:
  return np.maximum(x, 0)

ACTIVATIONS = {
  "gelu": gelu,
  "silu": silu,
  "relu": relu,
  "linear": lambda x: x,
}

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
  mean = x.mean(axis=1, keepdims=True)
  centered = x - mean
  var = (centered * centered).mean(axis=1, keepdims=True)
  return centered / np.sqrt(var + eps) * gamma + beta

def mlp_forward(x: np.ndarray, layers: Sequence[Layer], activation: str = "gelu", dtype=None) -> np.ndarray:
  """Affine layers with `activation` after every layer except the last"""

  if activation not in ACTIVATIONS:
    raise ValueError(f"unknown activation '{activation}'")
  if not layers:
    raise ShapeError("an MLP needs at least one layer")

  act = ACTIVATIONS[activation]
  h = _as_matrix(x, "MLP input", dtype=dtype)
  for i, (weight, bias) in enumerate(layers):
    h = linear(h, weight, bias, dtype=dtype)
    if i < len(layers) - 1:
      h = act(h)
  return ensure_finite(h, "MLP output")

def save_tensor(path: Union[str, Path], m: np.ndarray) -> None:
  arr = np.asarray(m)
  key = arr.dtype.newbyteorder("=").str
  if key not in CODE_FOR_DTYPE:
    raise TensorFileError(f"unsupported dtype {arr.dtype}", code="bad_dtype")
  if arr.ndim > MAX_NDIM:
    raise TensorFileError(f"{arr.ndim} dimensions exceed the limit of {MAX_NDIM}", code="shape_overflow")

  code = CODE_FOR_DTYPE[key]
  header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
  payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()

  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with open(path, "wb") as fh:
    fh.write(header)
    fh.write(payload)
  logger.debug(f"Wrote tensor {arr.shape} ({arr.dtype}) to {path}")

def load_tensor(path: Union[str, Path]) -> np.ndarray:
  path = Path(path)
  if not path.exists():
    raise TensorFileError(f"tensor file {path} does not exist", code="missing_file")
  raw = path.read_bytes()

  if len(raw) < 10 or raw[:8] != MAGIC:
    raise TensorFileError(f"bad magic in {path}", code="bad_magic")
  code, ndim = struct.unpack_from("<BB", raw, 8)
  if code not in DTYPE_CODES:
    raise TensorFileError(f"unknown dtype code {code} in {path}", code="bad_dtype")
  if ndim > MAX_NDIM:
    raise TensorFileError(f"{ndim} dimensions exceed the limit of {MAX_NDIM} in {path}", code="shape_overflow")

  offset = 10 + 8 * ndim
  if len(raw) < offset:
    raise TensorFileError(f"truncated header in {path}", code="truncated")
  shape = struct.unpack_from(f"<{ndim}Q", raw, 10)

  count = 1
  for dim in shape:
    count *= dim
    if count > MAX_ELEMENTS:
      raise TensorFileError(f"shape {shape} in {path} is too large", code="shape_overflow")

  dtype = DTYPE_CODES[code]
  expected = count * dtype.itemsize
  payload = raw[offset:]
  if len(payload) != expected:
    raise TensorFileError(f"payload of {path} has {len(payload)} bytes, expected {expected}", code="truncated")

  arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
  return arr.astype(dtype.newbyteorder("="), copy=True)
