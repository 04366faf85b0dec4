"""
Anatomy branch forward pass.

CLS projection + positional embedding + CLS motion, two windowed
self-attention layers, Dual-Graph GCN with residual, Video GPS broadcast,
bidirectional selective scan, 8-way head. The building blocks (GCN, scan)
are shared with the pathology branch.
"""

import logging
import numpy as np
from dataclasses import dataclass
from typing import Callable, List, Tuple
from pydantic import BaseModel, ConfigDict, model_validator

from app.config import ModelDims
from app.exceptions import NonFiniteError, ShapeError
from app.schemas.labels import NUM_ANATOMY
from app.utils.tensorio import (
  Layer, ensure_finite, gelu, layer_norm, linear, matmul, mlp_forward, silu, softplus,
)

logger = logging.getLogger(__name__)

# draw(name, shape, kind) -> array; kind tells initializers how to fill it
Draw = Callable[[str, Tuple[int, ...], str], np.ndarray]

@dataclass(frozen=True)
class DenseLayer:
  weight: np.ndarray
  bias: np.ndarray

  def as_layer(self) -> Layer:
    return self.weight, self.bias

@dataclass(frozen=True)
class AttentionWeights:
  wq: np.ndarray
  wk: np.ndarray
  wv: np.ndarray
  wo: np.ndarray
  ln_gamma: np.ndarray
  ln_beta: np.ndarray

@dataclass(frozen=True)
class GcnWeights:
  w_sim: np.ndarray
  w_dist: np.ndarray
  proj: np.ndarray

@dataclass(frozen=True)
class SsmWeights:
  """Selective SSM parameters; Δ, B, C are linear maps of the input frame"""

  a: np.ndarray
  w_delta: np.ndarray
  delta_bias: np.ndarray
  w_b: np.ndarray
  w_c: np.ndarray
  d_skip: np.ndarray

@dataclass(frozen=True)
class BiMambaWeights:
  fwd: SsmWeights
  bwd: SsmWeights
  merge: np.ndarray
  gate: np.ndarray

@dataclass(frozen=True)
class AnatomyWeights:
  in_proj: np.ndarray
  pos_emb: np.ndarray
  motion_proj: np.ndarray
  attention: Tuple[AttentionWeights, ...]
  gcn: GcnWeights
  gps: Tuple[DenseLayer, ...]
  mamba: BiMambaWeights
  head: DenseLayer

class WindowContext(BaseModel):
  model_config = ConfigDict(frozen=True)

  start: int
  total: int

  @model_validator(mode="after")
  def check_range(self):
    if self.total < 1 or not 0 <= self.start <= self.total:
      raise ValueError(f"window start {self.start} outside video of {self.total} frames")
    return self

  @property
  def r(self) -> float:
    return self.start / self.total

class SsmParams(BaseModel):
  """Per-frame Δ (T×D), B (T×S), C (T×S) produced from the input"""

  model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

  delta: np.ndarray
  b: np.ndarray
  c: np.ndarray

def build_attention(draw: Draw, prefix: str, d: int) -> AttentionWeights:
  return AttentionWeights(
    wq=draw(f"{prefix}.wq", (d, d), "weight"),
    wk=draw(f"{prefix}.wk", (d, d), "weight"),
    wv=draw(f"{prefix}.wv", (d, d), "weight"),
    wo=draw(f"{prefix}.wo", (d, d), "weight"),
    ln_gamma=draw(f"{prefix}.ln_gamma", (d,), "gamma"),
    ln_beta=draw(f"{prefix}.ln_beta", (d,), "bias"),
  )

def build_gcn(draw: Draw, prefix: str, d: int) -> GcnWeights:
  return GcnWeights(
    w_sim=draw(f"{prefix}.w_sim", (d, d), "weight"),
    w_dist=draw(f"{prefix}.w_dist", (d, d), "weight"),
    proj=draw(f"{prefix}.proj", (2 * d, d), "weight"),
  )

def build_ssm(draw: Draw, prefix: str, d: int, state: int) -> SsmWeights:
  return SsmWeights(
    a=draw(f"{prefix}.a", (d, state), "decay"),
    w_delta=draw(f"{prefix}.w_delta", (d, d), "weight"),
    delta_bias=draw(f"{prefix}.delta_bias", (d,), "dt_bias"),
    w_b=draw(f"{prefix}.w_b", (d, state), "weight"),
    w_c=draw(f"{prefix}.w_c", (d, state), "weight"),
    d_skip=draw(f"{prefix}.d_skip", (d,), "skip"),
  )

def build_mlp(draw: Draw, prefix: str, sizes: List[int]) -> Tuple[DenseLayer, ...]:
  return tuple(
    DenseLayer(
      weight=draw(f"{prefix}.{i}.weight", (sizes[i], sizes[i + 1]), "weight"),
      bias=draw(f"{prefix}.{i}.bias", (sizes[i + 1],), "bias"),
    )
    for i in range(len(sizes) - 1)
  )

def build_anatomy_weights(draw: Draw, dims: ModelDims, window: int) -> AnatomyWeights:
  d = dims.d
  return AnatomyWeights(
    in_proj=draw("in_proj", (dims.cls_dim, d), "weight"),
    pos_emb=draw("pos_emb", (window, d), "embed"),
    motion_proj=draw("motion_proj", (dims.cls_dim, d), "weight"),
    attention=tuple(build_attention(draw, f"attention.{i}", d) for i in range(dims.attn_layers)),
    gcn=build_gcn(draw, "gcn", d),
    gps=build_mlp(draw, "gps", [1, dims.gps_hidden, d]),
    mamba=BiMambaWeights(
      fwd=build_ssm(draw, "mamba.fwd", d, dims.state_size),
      bwd=build_ssm(draw, "mamba.bwd", d, dims.state_size),
      merge=draw("mamba.merge", (2 * d, d), "weight"),
      gate=draw("mamba.gate", (d, d), "weight"),
    ),
    head=DenseLayer(
      weight=draw("head.weight", (d, NUM_ANATOMY), "weight"),
      bias=draw("head.bias", (NUM_ANATOMY,), "bias"),
    ),
  )

def frame_motion(features: np.ndarray) -> np.ndarray:
  """Frame-to-frame difference; the first frame gets a zero row"""

  if features.ndim != 2 or features.shape[0] < 1:
    raise ShapeError(f"motion needs a non-empty T x D matrix, got {features.shape}")
  out = np.zeros_like(features)
  out[1:] = features[1:] - features[:-1]
  return out

def cls_motion(cls: np.ndarray) -> np.ndarray:
  return frame_motion(cls)

def _band_index(frames: int, radius: int) -> Tuple[np.ndarray, np.ndarray]:
  """Column index of offset o in [-r, r] for every row, clipped into range, plus the in-range mask"""

  r = max(0, min(radius, frames - 1))
  cols = np.arange(frames)[:, None] + np.arange(-r, r + 1)[None, :]
  valid = (cols >= 0) & (cols < frames)
  return np.clip(cols, 0, frames - 1), valid

def banded_attention(q: np.ndarray, k: np.ndarray, radius: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
  """Softmax weights over the ±radius band only, as a T x (2r+1) matrix with its column index"""

  T, dh = q.shape
  cols, valid = _band_index(T, radius)
  shifted_k = k[cols]
  scores = np.zeros(cols.shape, dtype=q.dtype)
  for j in range(dh):
    scores += q[:, j:j + 1] * shifted_k[:, :, j]
  scores = np.where(valid, scores * q.dtype.type(scale), -np.inf)
  e = np.exp(scores - scores.max(axis=1, keepdims=True))
  return e / e.sum(axis=1, keepdims=True), cols

def _scatter_rows(band: np.ndarray, cols: np.ndarray, frames: int) -> np.ndarray:
  dense = np.zeros((frames, frames), dtype=band.dtype)
  np.add.at(dense, (np.repeat(np.arange(frames), cols.shape[1]), cols.ravel()), band.ravel())
  return dense

def _gather_rows(weights: np.ndarray, cols: np.ndarray, x: np.ndarray) -> np.ndarray:
  """Sparse row product: out[t] = sum_m weights[t, m] * x[cols[t, m]], ascending m"""

  out = np.zeros((weights.shape[0], x.shape[1]), dtype=x.dtype)
  for m in range(weights.shape[1]):
    out += weights[:, m:m + 1] * x[cols[:, m]]
  return out

def attention_weights(q: np.ndarray, k: np.ndarray, radius: int, scale: float) -> np.ndarray:
  """Banded softmax attention: frame t sees frames within ±radius only"""

  band, cols = banded_attention(q, k, radius, scale)
  return _scatter_rows(band, cols, q.shape[0])

def windowed_self_attention(h: np.ndarray, w: AttentionWeights, radius: int = 16, heads: int = 8, return_weights: bool = False):
  """Multi-head banded self-attention with post-norm residual"""

  T, d = h.shape
  if w.wq.shape != (d, d):
    raise ShapeError(f"attention weights {w.wq.shape} do not match hidden size {d}")
  if radius < 1:
    raise ValueError("attention radius must be >= 1")
  if d % heads:
    raise ShapeError(f"{heads} heads do not divide hidden size {d}")

  dh = d // heads
  scale = 1.0 / np.sqrt(dh)
  q = matmul(h, w.wq)
  k = matmul(h, w.wk)
  v = matmul(h, w.wv)

  context = np.empty_like(v)
  all_weights = []
  for head in range(heads):
    cols = slice(head * dh, (head + 1) * dh)
    band, band_cols = banded_attention(q[:, cols], k[:, cols], radius, scale)
    # out-of-range band slots carry weight 0 and point at a clipped, finite row
    context[:, cols] = _gather_rows(band, band_cols, v[:, cols])
    if return_weights:
      all_weights.append(_scatter_rows(band, band_cols, T))

  out = layer_norm(h + matmul(context, w.wo), w.ln_gamma, w.ln_beta)
  ensure_finite(out, "attention output")
  if return_weights:
    return out, np.stack(all_weights)
  return out

def similarity_neighbours(h: np.ndarray, k: int = 8) -> Tuple[np.ndarray, np.ndarray]:
  """Top-k cosine neighbours (clipped at 0) plus self-loop, row-normalised, columns ascending"""

  if k < 1:
    raise ValueError("neighbour count k must be >= 1")
  T = h.shape[0]
  norms = np.sqrt((h * h).sum(axis=1))
  safe = np.where(norms > 0, norms, 1.0)
  unit = h / safe[:, None]
  sims = matmul(unit, unit.T)
  sims[norms == 0, :] = 0.0
  sims[:, norms == 0] = 0.0

  rows = np.arange(T)
  ranked = sims.copy()
  ranked[rows, rows] = -np.inf
  picked = np.argsort(-ranked, axis=1, kind="stable")[:, :min(k, T - 1)]
  cols = np.concatenate([picked, rows[:, None]], axis=1)
  weights = np.concatenate([np.maximum(sims[rows[:, None], picked], 0.0), np.ones((T, 1), dtype=sims.dtype)], axis=1)

  order = np.argsort(cols, axis=1, kind="stable")
  cols = np.take_along_axis(cols, order, axis=1)
  weights = np.take_along_axis(weights, order, axis=1).astype(h.dtype, copy=False)
  return weights / weights.sum(axis=1, keepdims=True), cols

def similarity_adjacency(h: np.ndarray, k: int = 8) -> np.ndarray:
  """Dense T x T form of the similarity graph"""

  weights, cols = similarity_neighbours(h, k)
  return _scatter_rows(weights, cols, h.shape[0])

def distance_neighbours(frames: int, radius: int = 5, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
  if radius < 0:
    raise ValueError("distance radius must be >= 0")
  cols, valid = _band_index(frames, radius)
  counts = valid.sum(axis=1, keepdims=True)
  weights = np.where(valid, dtype(1.0) / counts.astype(dtype), dtype(0.0)).astype(dtype)
  return weights, cols

def distance_adjacency(frames: int, radius: int = 5, dtype=np.float32) -> np.ndarray:
  """Band of width ±radius, row-normalised"""

  weights, cols = distance_neighbours(frames, radius, dtype)
  return _scatter_rows(weights, cols, frames)

def dual_graph_gcn(h: np.ndarray, w: GcnWeights, k: int = 8, radius: int = 5) -> np.ndarray:
  """Similarity and distance graph convolutions, concatenated, projected, added to the input"""

  residual = h
  sim_w, sim_cols = similarity_neighbours(h, k)
  dist_w, dist_cols = distance_neighbours(h.shape[0], radius, dtype=h.dtype.type)
  g_sim = gelu(_gather_rows(sim_w, sim_cols, matmul(h, w.w_sim)))
  g_dist = gelu(_gather_rows(dist_w, dist_cols, matmul(h, w.w_dist)))
  out = residual + matmul(np.concatenate([g_sim, g_dist], axis=1), w.proj)
  return ensure_finite(out, "GCN output")

def gps_inject(h: np.ndarray, ctx: WindowContext, gps: Tuple[DenseLayer, ...]) -> np.ndarray:
  """Broadcast-add MLP(r) to every frame, r = window start / total frames"""

  r = np.array([[ctx.r]], dtype=h.dtype)
  prior = mlp_forward(r, [layer.as_layer() for layer in gps], dtype=h.dtype)
  return h + prior

def scan_params(x: np.ndarray, blk: SsmWeights) -> SsmParams:
  delta = softplus(linear(x, blk.w_delta, blk.delta_bias))
  if not np.isfinite(delta).all():
    raise NonFiniteError("selective scan step Δ is not finite")
  return SsmParams(delta=delta, b=matmul(x, blk.w_b), c=matmul(x, blk.w_c))

def scan_with_params(x: np.ndarray, params: SsmParams, a: np.ndarray, d_skip: np.ndarray) -> np.ndarray:
  """Sequential recurrence h_t = exp(Δ_t A) h_{t-1} + Δ_t B_t x_t, y_t = <C_t, h_t> + D x_t"""

  T, D = x.shape
  if a.shape[0] != D or params.delta.shape != (T, D):
    raise ShapeError(f"scan parameters do not match input {x.shape}")
  state = np.zeros((D, a.shape[1]), dtype=x.dtype)
  y = np.empty_like(x)
  for t in range(T):
    decay = np.exp(params.delta[t][:, None] * a)
    state = decay * state + (params.delta[t][:, None] * params.b[t][None, :]) * x[t][:, None]
    y[t] = (state * params.c[t][None, :]).sum(axis=1)
  return y + d_skip * x

def scan_with_params_chunked(x: np.ndarray, params: SsmParams, a: np.ndarray, d_skip: np.ndarray, chunk: int = 16) -> np.ndarray:
  """The same recurrence evaluated chunk by chunk with log-space cumulative decays"""

  if chunk < 1:
    raise ValueError("chunk length must be >= 1")
  T, D = x.shape
  S = a.shape[1]
  state = np.zeros((D, S), dtype=np.float64)
  y = np.empty((T, D), dtype=np.float64)
  a64 = a.astype(np.float64)
  for start in range(0, T, chunk):
    stop = min(start + chunk, T)
    delta = params.delta[start:stop].astype(np.float64)
    b = params.b[start:stop].astype(np.float64)
    c = params.c[start:stop].astype(np.float64)
    xs = x[start:stop].astype(np.float64)

    # L[t] = sum_{s<=t} Δ_s A: log of the decay accumulated since the chunk start
    log_decay = np.cumsum(delta[:, :, None] * a64[None], axis=0)
    inputs = (delta[:, :, None] * b[:, None, :]) * xs[:, :, None]
    n = stop - start
    lower = np.tril(np.ones((n, n), dtype=bool))
    # rel[t, s] = exp(L[t] - L[s]) for s <= t
    diff = log_decay[:, None] - log_decay[None, :]
    rel = np.where(lower[:, :, None, None], np.exp(np.where(lower[:, :, None, None], diff, 0.0)), 0.0)
    states = np.einsum("tsdn,sdn->tdn", rel, inputs) + np.exp(log_decay) * state[None]
    y[start:stop] = np.einsum("tdn,tn->td", states, c)
    state = states[-1]
  return (y + d_skip.astype(np.float64) * x.astype(np.float64)).astype(x.dtype)

def selective_scan(x: np.ndarray, blk: SsmWeights, direction: str = "fwd") -> np.ndarray:
  if direction not in ("fwd", "bwd"):
    raise ValueError(f"unknown scan direction '{direction}'")
  if x.shape[0] < 1:
    raise ShapeError("selective scan needs at least one frame")
  seq = x if direction == "fwd" else x[::-1]
  y = scan_with_params(seq, scan_params(seq, blk), blk.a, blk.d_skip)
  return y if direction == "fwd" else y[::-1].copy()

def selective_scan_chunked(x: np.ndarray, blk: SsmWeights, direction: str = "fwd", chunk: int = 16) -> np.ndarray:
  seq = x if direction == "fwd" else x[::-1]
  y = scan_with_params_chunked(seq, scan_params(seq, blk), blk.a, blk.d_skip, chunk)
  return y if direction == "fwd" else y[::-1].copy()

def bidirectional_mamba(h: np.ndarray, w: BiMambaWeights) -> np.ndarray:
  """h + merge([scan_fwd(h) ‖ scan_bwd(h)]) ⊙ SiLU(gate(h))"""

  fwd = selective_scan(h, w.fwd, "fwd")
  bwd = selective_scan(h, w.bwd, "bwd")
  merged = matmul(np.concatenate([fwd, bwd], axis=1), w.merge)
  out = h + merged * silu(matmul(h, w.gate))
  return ensure_finite(out, "bidirectional scan output")

def anatomy_forward(cls: np.ndarray, ctx: WindowContext, w: AnatomyWeights, dims: ModelDims) -> np.ndarray:
  """Anatomy logits (T×8) for one window of CLS features"""

  T = cls.shape[0]
  if T > w.pos_emb.shape[0]:
    raise ShapeError(f"window of {T} frames exceeds positional embedding length {w.pos_emb.shape[0]}")
  if cls.shape[1] != w.in_proj.shape[0]:
    raise ShapeError(f"CLS width {cls.shape[1]} does not match input projection {w.in_proj.shape}")

  h = matmul(cls, w.in_proj) + w.pos_emb[:T] + matmul(cls_motion(cls), w.motion_proj)
  for layer in w.attention:
    h = windowed_self_attention(h, layer, dims.attn_radius, dims.heads)
  h = dual_graph_gcn(h, w.gcn, dims.gcn_k, dims.gcn_radius)
  h = gps_inject(h, ctx, w.gps)
  h = bidirectional_mamba(h, w.mamba)
  logits = linear(h, w.head.weight, w.head.bias)
  return ensure_finite(logits, "anatomy logits")
