import pytest
import logging
import numpy as np
from pathlib import Path
from dotenv import load_dotenv

from app.config import ModelDims, SynthConfig
from app.utils.rng import SplitMix64

logging.basicConfig(
  level=logging.INFO,
  format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

def pytest_configure(config):
  root_dir = Path(__file__).resolve().parents[2]
  env_test_path = root_dir / ".env.test"

  if env_test_path.exists():
    load_dotenv(dotenv_path=env_test_path, override=True)
    print(f"Loaded test environment from {env_test_path}")

@pytest.fixture
def toy_dims():
  """Desk-test model size: d=8 with narrow CLS/patch features"""

  return ModelDims(
    d=8, cls_dim=12, patch_dim=10, heads=2, attn_radius=16, gcn_k=3, gcn_radius=2,
    state_size=4, gps_hidden=6, cond_hidden=6, attn_layers=1,
  )

@pytest.fixture
def rng():
  return SplitMix64(1234, "tests")

@pytest.fixture
def toy_synth():
  return SynthConfig(frames=600, seed=3, cls_dim=12, patch_dim=10, burst_rate=4.0)

@pytest.fixture
def random_matrix(rng):
  def make(rows: int, cols: int, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
    return (rng.normal(rows * cols) * scale).reshape(rows, cols).astype(dtype)

  return make

@pytest.fixture
def run_cli(capsys):
  """Run the command line in-process; returns (exit code, stdout, stderr)"""

  from app.main import main

  def run(*argv: str):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err

  return run
