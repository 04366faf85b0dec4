import pytest
import numpy as np

from app.exceptions import NonFiniteError, ShapeError, TensorFileError
from app.utils.tensorio import MAGIC, gelu, load_tensor, matmul, mlp_forward, row_softmax, save_tensor, sigmoid

def test_matmul_identity_and_dot():
  m = np.array([[1, 2], [3, 4]], dtype=np.float32)
  assert np.array_equal(matmul(np.eye(2, dtype=np.float32), m), m)
  assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

def test_matmul_matches_triple_loop_exactly(random_matrix):
  a = random_matrix(3, 4)
  b = random_matrix(4, 2)
  out = matmul(a, b)

  for i in range(3):
    for j in range(2):
      s = 0.0
      for k in range(4):
        s += a[i, k] * b[k, j]
      assert out[i, j] == s

def test_matmul_shape_mismatch():
  with pytest.raises(ShapeError):
    matmul(np.ones((2, 3)), np.ones((2, 3)))

def test_matmul_keeps_float32_unless_asked():
  a = np.ones((2, 2), dtype=np.float32)
  assert matmul(a, a).dtype == np.float32
  assert matmul(a, a, dtype=np.float64).dtype == np.float64

def test_row_softmax_cases():
  assert np.allclose(row_softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
  big = row_softmax(np.array([[1000.0, 1000.0, 1000.0]]))
  assert np.allclose(big, 1.0 / 3.0)

  x = np.array([[1.0, 2.0, 3.0]])
  oracle = np.exp(x) / np.exp(x).sum()
  assert np.allclose(row_softmax(x), oracle, rtol=1e-6, atol=0)

def test_row_softmax_rows_sum_to_one_on_extremes(random_matrix):
  for scale in (1.0, 1e2, 1e4):
    out = row_softmax(random_matrix(6, 9, scale=scale))
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-6)

def test_row_softmax_rejects_non_finite():
  with pytest.raises(NonFiniteError):
    row_softmax(np.array([[0.0, np.nan]]))

def test_sigmoid_stable_at_extremes():
  out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
  assert out.tolist() == [0.0, 0.5, 1.0]

def test_mlp_zero_and_identity():
  x = np.array([[0.3, -1.2, 2.0]])
  zero = [(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))]
  assert np.array_equal(mlp_forward(x, zero), np.zeros((1, 2)))
  assert np.array_equal(mlp_forward(x, [(np.eye(3), np.zeros(3))], activation="linear"), x)

def test_mlp_two_layers_match_hand_oracle(random_matrix):
  x = random_matrix(1, 3)
  w1, b1 = random_matrix(3, 5), random_matrix(1, 5)[0]
  w2, b2 = random_matrix(5, 2), random_matrix(1, 2)[0]

  h = x @ w1 + b1
  h = 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (h + 0.044715 * h ** 3)))
  oracle = h @ w2 + b2
  assert np.allclose(mlp_forward(x, [(w1, b1), (w2, b2)]), oracle, rtol=1e-5, atol=1e-12)

def test_gelu_keeps_dtype():
  assert gelu(np.ones(3, dtype=np.float32)).dtype == np.float32

def test_mlp_shape_mismatch():
  with pytest.raises(ShapeError):
    mlp_forward(np.ones((1, 3)), [(np.ones((4, 2)), np.zeros(2))])

def test_tensor_round_trip_bit_exact(tmp_path, rng):
  for i, dtype in enumerate((np.float32, np.float64, np.uint8)):
    shape = (2, 3) if i == 0 else (i + 1, 2, 2)
    data = (rng.uniform(int(np.prod(shape))) * 200).reshape(shape).astype(dtype)
    path = tmp_path / f"t{i}.ten"
    save_tensor(path, data)
    loaded = load_tensor(path)
    assert loaded.dtype == data.dtype
    assert loaded.shape == data.shape
    assert loaded.tobytes() == data.tobytes()

def test_tensor_round_trip_random_shapes(tmp_path, rng):
  for case in range(100):
    ndim = rng.integers(1, 4)
    shape = tuple(int(s) for s in rng.integers(0, 4, ndim))
    data = rng.normal(int(np.prod(shape))).reshape(shape).astype(np.float32)
    path = tmp_path / "case.ten"
    save_tensor(path, data)
    assert load_tensor(path).tobytes() == data.tobytes()
    assert load_tensor(path).shape == shape

def test_empty_matrix_round_trip(tmp_path):
  path = tmp_path / "empty.ten"
  save_tensor(path, np.zeros((0, 5), dtype=np.float32))
  loaded = load_tensor(path)
  assert loaded.shape == (0, 5)
  assert path.stat().st_size == 8 + 2 + 2 * 8

def test_tensor_header_layout(tmp_path):
  path = tmp_path / "m.ten"
  save_tensor(path, np.ones((2, 3), dtype=np.float64))
  raw = path.read_bytes()
  assert raw[:8] == MAGIC
  assert raw[8] == 1
  assert raw[9] == 2
  assert int.from_bytes(raw[10:18], "little") == 2
  assert int.from_bytes(raw[18:26], "little") == 3

@pytest.mark.parametrize("mangle, code", [
  (lambda raw: b"BADMAGIC" + raw[8:], "bad_magic"),
  (lambda raw: raw[:-4], "truncated"),
  (lambda raw: raw[:8] + bytes([9]) + raw[9:], "bad_dtype"),
  (lambda raw: raw[:9] + bytes([5]) + raw[10:], "shape_overflow"),
])
def test_load_rejects_corrupt_files(tmp_path, mangle, code):
  path = tmp_path / "m.ten"
  save_tensor(path, np.ones((2, 3), dtype=np.float32))
  path.write_bytes(mangle(path.read_bytes()))
  with pytest.raises(TensorFileError) as exc:
    load_tensor(path)
  assert exc.value.code == code

def test_load_missing_file(tmp_path):
  with pytest.raises(TensorFileError) as exc:
    load_tensor(tmp_path / "nope.ten")
  assert exc.value.code == "missing_file"
