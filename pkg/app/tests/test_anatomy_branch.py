import pytest
import numpy as np
from dataclasses import replace

from app.services.anatomy_branch import (
  SsmParams, WindowContext, anatomy_forward, attention_weights, bidirectional_mamba, cls_motion,
  distance_adjacency, dual_graph_gcn, gps_inject, scan_params, scan_with_params, scan_with_params_chunked,
  selective_scan, selective_scan_chunked, similarity_adjacency, windowed_self_attention,
)
from app.services.weights import init_anatomy_weights, xavier_draw, zeros_draw
from app.services.anatomy_branch import build_anatomy_weights, build_attention, build_gcn, build_mlp, build_ssm
from app.utils.tensorio import layer_norm
from app.utils.rng import SplitMix64

def _gelu(x):
  return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))

def _silu(x):
  return x / (1.0 + np.exp(-x))

def _softplus(x):
  return np.logaddexp(0.0, x)

def _weights64(seed: int):
  return xavier_draw(seed, dtype=np.float64)

def test_cls_motion_cases(rng):
  v = rng.normal(4)
  u = rng.normal(4)
  assert np.array_equal(cls_motion(np.tile(v, (3, 1))), np.zeros((3, 4)))
  assert np.array_equal(cls_motion(v[None, :]), np.zeros((1, 4)))
  assert np.allclose(cls_motion(np.stack([v, v + u])), np.stack([np.zeros(4), u]))

def test_single_frame_attention_is_identity_weight(random_matrix):
  w = build_attention(_weights64(1), "attention.0", 4)
  h = random_matrix(1, 4)
  out, weights = windowed_self_attention(h, w, radius=16, heads=2, return_weights=True)
  assert np.array_equal(weights, np.ones((2, 1, 1)))
  v = h @ w.wv
  assert np.allclose(out, layer_norm(h + v @ w.wo, w.ln_gamma, w.ln_beta), rtol=1e-9)

def test_identical_frames_share_attention_equally(random_matrix):
  w = build_attention(_weights64(2), "attention.0", 4)
  h = np.tile(random_matrix(1, 4), (2, 1))
  _, weights = windowed_self_attention(h, w, radius=16, heads=2, return_weights=True)
  assert np.allclose(weights, 0.5)

def test_attention_matches_dense_oracle(random_matrix):
  d, heads = 4, 2
  w = build_attention(_weights64(3), "attention.0", d)
  h = random_matrix(3, d)
  out = windowed_self_attention(h, w, radius=16, heads=heads)

  q, k, v = h @ w.wq, h @ w.wk, h @ w.wv
  dh = d // heads
  context = np.zeros_like(v)
  for head in range(heads):
    cols = slice(head * dh, (head + 1) * dh)
    scores = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    context[:, cols] = (e / e.sum(axis=1, keepdims=True)) @ v[:, cols]
  x = h + context @ w.wo
  mu = x.mean(axis=1, keepdims=True)
  var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
  oracle = (x - mu) / np.sqrt(var + 1e-5) * w.ln_gamma + w.ln_beta
  assert np.allclose(out, oracle, rtol=1e-5, atol=1e-10)

def test_attention_rows_are_stochastic_and_banded(rng):
  for _ in range(100):
    T = rng.integers(1, 20)
    radius = rng.integers(1, 5)
    q = rng.normal(T * 3).reshape(T, 3)
    k = rng.normal(T * 3).reshape(T, 3)
    attn = attention_weights(q, k, radius, 0.5)
    assert np.all(np.abs(attn.sum(axis=1) - 1.0) <= 1e-6)
    idx = np.arange(T)
    assert np.all(attn[np.abs(idx[:, None] - idx[None, :]) > radius] == 0.0)

def test_banded_attention_matches_masked_dense_attention(random_matrix):
  d, heads, radius, T = 8, 2, 3, 40
  w = build_attention(_weights64(11), "attention.0", d)
  h = random_matrix(T, d)
  out, weights = windowed_self_attention(h, w, radius=radius, heads=heads, return_weights=True)

  q, k, v = h @ w.wq, h @ w.wk, h @ w.wv
  dh = d // heads
  idx = np.arange(T)
  outside = np.abs(idx[:, None] - idx[None, :]) > radius
  context = np.zeros_like(v)
  for head in range(heads):
    cols = slice(head * dh, (head + 1) * dh)
    scores = np.where(outside, -np.inf, q[:, cols] @ k[:, cols].T / np.sqrt(dh))
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(weights[head], attn, rtol=1e-9, atol=1e-15)
    context[:, cols] = attn @ v[:, cols]
  oracle = layer_norm(h + context @ w.wo, w.ln_gamma, w.ln_beta)
  assert np.allclose(out, oracle, rtol=1e-7, atol=1e-10)

def test_sparse_gcn_matches_dense_adjacency_product(random_matrix):
  w = build_gcn(_weights64(12), "gcn", 6)
  h = random_matrix(40, 6)
  a_sim = similarity_adjacency(h, k=3)
  a_dist = distance_adjacency(40, radius=2, dtype=np.float64)
  assert np.count_nonzero(a_sim, axis=1).max() <= 4
  oracle = h + np.concatenate([_gelu(a_sim @ h @ w.w_sim), _gelu(a_dist @ h @ w.w_dist)], axis=1) @ w.proj
  assert np.allclose(dual_graph_gcn(h, w, k=3, radius=2), oracle, rtol=1e-7, atol=1e-10)

def test_similarity_adjacency_cases(random_matrix):
  same = np.tile(random_matrix(1, 5), (3, 1))
  assert np.allclose(similarity_adjacency(same, k=2), 1.0 / 3.0)
  assert np.allclose(similarity_adjacency(np.eye(4), k=2), np.eye(4))

def test_similarity_adjacency_matches_sort_oracle(random_matrix):
  h = random_matrix(5, 512)
  adj = similarity_adjacency(h, k=2)

  unit = h / np.linalg.norm(h, axis=1, keepdims=True)
  sims = unit @ unit.T
  oracle = np.zeros((5, 5))
  for i in range(5):
    others = sorted((j for j in range(5) if j != i), key=lambda j: -sims[i, j])[:2]
    for j in others:
      oracle[i, j] = max(sims[i, j], 0.0)
    oracle[i, i] = 1.0
    oracle[i] /= oracle[i].sum()
  assert np.allclose(adj, oracle, rtol=1e-9, atol=1e-12)

def test_distance_adjacency_cases():
  assert distance_adjacency(1, radius=5).tolist() == [[1.0]]
  expected = np.array([[1 / 2, 1 / 2, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 2, 1 / 2]])
  assert np.allclose(distance_adjacency(3, radius=1, dtype=np.float64), expected)

  adj = distance_adjacency(7, radius=2, dtype=np.float64)
  assert np.allclose(adj.sum(axis=1), 1.0, atol=1e-12)
  for i in range(7):
    for j in range(7):
      assert (adj[i, j] > 0) == (abs(i - j) <= 2)

def test_adjacency_rows_are_stochastic(rng):
  for _ in range(100):
    T = rng.integers(1, 12)
    h = rng.normal(T * 6).reshape(T, 6)
    assert np.all(np.abs(similarity_adjacency(h, k=3).sum(axis=1) - 1.0) <= 1e-6)
    assert np.all(np.abs(distance_adjacency(T, radius=rng.integers(0, 4), dtype=np.float64).sum(axis=1) - 1.0) <= 1e-6)

def test_gcn_zero_weights_is_pure_residual(rng):
  w = build_gcn(zeros_draw(), "gcn", 8)
  h = rng.normal(6 * 8).reshape(6, 8).astype(np.float32)
  assert np.array_equal(dual_graph_gcn(h, w, k=3, radius=2), h)

def test_gcn_matches_composition_oracle(random_matrix):
  w = build_gcn(_weights64(4), "gcn", 4)
  h = random_matrix(4, 4)
  out = dual_graph_gcn(h, w, k=2, radius=1)
  a_sim = similarity_adjacency(h, k=2)
  a_dist = distance_adjacency(4, radius=1, dtype=np.float64)
  oracle = h + np.concatenate([_gelu(a_sim @ h @ w.w_sim), _gelu(a_dist @ h @ w.w_dist)], axis=1) @ w.proj
  assert np.allclose(out, oracle, rtol=1e-5, atol=1e-10)

def test_gcn_single_frame(random_matrix):
  w = build_gcn(_weights64(5), "gcn", 4)
  h = random_matrix(1, 4)
  oracle = h + np.concatenate([_gelu(h @ w.w_sim), _gelu(h @ w.w_dist)], axis=1) @ w.proj
  assert np.allclose(dual_graph_gcn(h, w, k=8, radius=5), oracle, rtol=1e-9)

def test_gps_inject_is_a_uniform_shift(random_matrix):
  gps = build_mlp(_weights64(6), "gps", [1, 6, 4])
  ctx = WindowContext(start=1, total=4)
  # on a zero input the added prior is the same row for every frame, bit for bit
  flat = gps_inject(np.zeros((3, 4)), ctx, gps)
  assert np.array_equal(flat[0], flat[1]) and np.array_equal(flat[1], flat[2])

  h = random_matrix(2, 4)
  shift = gps_inject(h, ctx, gps) - h
  (w1, b1), (w2, b2) = [(layer.weight, layer.bias) for layer in gps]
  expected = _gelu(np.array([[0.25]]) @ w1 + b1) @ w2 + b2
  assert np.allclose(shift, np.tile(expected, (2, 1)), rtol=1e-9, atol=1e-12)
  assert np.allclose(flat[0], expected[0], rtol=1e-9, atol=1e-12)

  at_zero = gps_inject(h, WindowContext(start=0, total=4), gps) - h
  at_one = gps_inject(h, WindowContext(start=4, total=4), gps) - h
  mlp0 = _gelu(np.zeros((1, 1)) @ w1 + b1) @ w2 + b2
  mlp1 = _gelu(np.ones((1, 1)) @ w1 + b1) @ w2 + b2
  assert np.allclose(at_one - at_zero, np.tile(mlp1 - mlp0, (2, 1)), rtol=1e-9, atol=1e-12)

def test_gps_zero_weights_is_identity(random_matrix):
  gps = build_mlp(zeros_draw(np.float64), "gps", [1, 6, 4])
  h = random_matrix(3, 4)
  assert np.array_equal(gps_inject(h, WindowContext(start=2, total=9), gps), h)

def test_memoryless_scan_limit(random_matrix):
  T, D, S = 5, 3, 2
  x = random_matrix(T, D)
  params = SsmParams(delta=np.abs(random_matrix(T, D)) + 0.1, b=random_matrix(T, S), c=random_matrix(T, S))
  a = np.full((D, S), -1e6)
  d_skip = random_matrix(1, D)[0]
  y = scan_with_params(x, params, a, d_skip)
  expected = np.einsum("tn,td->td", params.c * params.b, params.delta * x) + d_skip * x
  assert np.allclose(y, expected, rtol=1e-9, atol=1e-14)

def test_single_frame_scan_is_direction_free(random_matrix):
  blk = build_ssm(_weights64(7), "mamba.fwd", 4, 3)
  x = random_matrix(1, 4)
  assert np.array_equal(selective_scan(x, blk, "fwd"), selective_scan(x, blk, "bwd"))

def test_scan_is_linear_in_x_for_fixed_params(random_matrix):
  x = random_matrix(7, 3)
  params = SsmParams(delta=np.abs(random_matrix(7, 3)), b=random_matrix(7, 2), c=random_matrix(7, 2))
  a = -np.abs(random_matrix(3, 2))
  d_skip = random_matrix(1, 3)[0]
  assert np.allclose(scan_with_params(2.5 * x, params, a, d_skip), 2.5 * scan_with_params(x, params, a, d_skip), rtol=1e-5)

def test_sequential_scan_equals_chunked_scan(random_matrix):
  blk = build_ssm(_weights64(8), "mamba.fwd", 4, 4)
  x = random_matrix(9, 4)
  seq = selective_scan(x, blk)
  chunked = selective_scan_chunked(x, blk, chunk=3)
  assert np.allclose(chunked, seq, rtol=1e-5, atol=1e-12)

def test_scan_equivalence_property():
  rng = SplitMix64(99, "scan_property")
  for case in range(100):
    T = rng.integers(1, 64)
    D = rng.integers(1, 4)
    S = rng.integers(1, 8)
    x = rng.normal(T * D).reshape(T, D)
    params = scan_params(x, build_ssm(xavier_draw(case, np.float64), "ssm", D, S))
    a = -(1.0 + rng.uniform(D * S).reshape(D, S) * S)
    d_skip = rng.normal(D)
    seq = scan_with_params(x, params, a, d_skip)
    chunked = scan_with_params_chunked(x, params, a, d_skip, chunk=rng.integers(1, 16))
    scale = max(np.abs(seq).max(), 1e-12)
    assert np.abs(chunked - seq).max() / scale <= 1e-5

def test_palindrome_reversal_symmetry(random_matrix):
  blk = build_ssm(_weights64(9), "mamba.fwd", 4, 3)
  half = random_matrix(3, 4)
  h = np.concatenate([half, half[:2][::-1]])
  assert np.array_equal(h, h[::-1])
  assert np.allclose(selective_scan(h, blk, "fwd"), selective_scan(h, blk, "bwd")[::-1], rtol=1e-12, atol=1e-14)

def test_bidirectional_zero_merge_is_identity(random_matrix, toy_dims):
  w = init_anatomy_weights(toy_dims, 16, seed=1).mamba
  w = replace(w, merge=np.zeros_like(w.merge))
  h = random_matrix(5, toy_dims.d).astype(np.float32)
  assert np.array_equal(bidirectional_mamba(h, w), h)

def test_bidirectional_matches_composition_oracle(random_matrix):
  draw = _weights64(10)
  fwd, bwd = build_ssm(draw, "mamba.fwd", 4, 3), build_ssm(draw, "mamba.bwd", 4, 3)
  from app.services.anatomy_branch import BiMambaWeights
  w = BiMambaWeights(fwd=fwd, bwd=bwd, merge=draw("mamba.merge", (8, 4), "weight"), gate=draw("mamba.gate", (4, 4), "weight"))
  h = random_matrix(5, 4)

  def scan(x, blk):
    delta = _softplus(x @ blk.w_delta + blk.delta_bias)
    b, c = x @ blk.w_b, x @ blk.w_c
    state = np.zeros(blk.a.shape)
    ys = []
    for t in range(x.shape[0]):
      state = np.exp(delta[t][:, None] * blk.a) * state + delta[t][:, None] * b[t][None, :] * x[t][:, None]
      ys.append((state * c[t]).sum(axis=1))
    return np.array(ys) + blk.d_skip * x

  f = scan(h, fwd)
  r = scan(h[::-1], bwd)[::-1]
  oracle = h + (np.concatenate([f, r], axis=1) @ w.merge) * _silu(h @ w.gate)
  assert np.allclose(bidirectional_mamba(h, w), oracle, rtol=1e-5, atol=1e-10)

def test_zero_weights_give_zero_logits(toy_dims, random_matrix):
  w = build_anatomy_weights(zeros_draw(), toy_dims, 16)
  cls = random_matrix(6, toy_dims.cls_dim).astype(np.float32)
  logits = anatomy_forward(cls, WindowContext(start=0, total=6), w, toy_dims)
  assert logits.shape == (6, 8)
  assert np.array_equal(logits, np.zeros((6, 8), dtype=np.float32))

def test_forward_is_deterministic(toy_dims, random_matrix):
  w = init_anatomy_weights(toy_dims, 16, seed=3)
  cls = random_matrix(10, toy_dims.cls_dim).astype(np.float32)
  ctx = WindowContext(start=4, total=40)
  assert anatomy_forward(cls, ctx, w, toy_dims).tobytes() == anatomy_forward(cls, ctx, w, toy_dims).tobytes()

def test_forward_matches_straight_line_oracle(toy_dims, random_matrix):
  w = build_anatomy_weights(_weights64(11), toy_dims, 16)
  cls = random_matrix(4, toy_dims.cls_dim)
  ctx = WindowContext(start=8, total=32)
  out = anatomy_forward(cls, ctx, w, toy_dims)

  h = cls @ w.in_proj + w.pos_emb[:4] + np.vstack([np.zeros((1, cls.shape[1])), np.diff(cls, axis=0)]) @ w.motion_proj
  for layer in w.attention:
    h = windowed_self_attention(h, layer, toy_dims.attn_radius, toy_dims.heads)
  h = dual_graph_gcn(h, w.gcn, toy_dims.gcn_k, toy_dims.gcn_radius)
  (g1, c1), (g2, c2) = [(layer.weight, layer.bias) for layer in w.gps]
  h = h + (_gelu(np.array([[0.25]]) @ g1 + c1) @ g2 + c2)
  h = bidirectional_mamba(h, w.mamba)
  oracle = h @ w.head.weight + w.head.bias
  assert np.allclose(out, oracle, rtol=1e-5, atol=1e-9)

def test_window_longer_than_positional_table(toy_dims, random_matrix):
  from app.exceptions import ShapeError
  w = init_anatomy_weights(toy_dims, 4, seed=0)
  with pytest.raises(ShapeError):
    anatomy_forward(random_matrix(5, toy_dims.cls_dim).astype(np.float32), WindowContext(start=0, total=5), w, toy_dims)
