import json
import logging
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.config import RunConfig, load_config
from app.exceptions import ConfigError, DatasetError

logger = logging.getLogger(__name__)

def add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
  parser.add_argument("--config", help="JSON run configuration document")
  parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
  parser.add_argument("--out", required=out_required, help="output directory")
  parser.add_argument(
    "--set", dest="settings", action="append", default=[], metavar="KEY=VALUE",
    help="override one config value, e.g. --set viterbi.skip_penalty=3 (value parsed as JSON)",
  )

def parse_settings(settings: List[str]) -> Dict[str, Any]:
  """Turn `a.b=value` pairs into a nested override dict"""

  overrides: Dict[str, Any] = {}
  for item in settings:
    key, sep, raw = item.partition("=")
    if not sep or not key:
      raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
    try:
      value = json.loads(raw)
    except json.JSONDecodeError:
      value = raw
    node = overrides
    parts = key.split(".")
    for part in parts[:-1]:
      node = node.setdefault(part, {})
    node[parts[-1]] = value
  return overrides

def resolve_config(args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
  """Config document < --set values < dedicated flags"""

  merged = parse_settings(getattr(args, "settings", []))
  if getattr(args, "seed", None) is not None:
    merged["seed"] = args.seed
  for key, value in (overrides or {}).items():
    if isinstance(value, dict):
      merged.setdefault(key, {}).update(value)
    else:
      merged[key] = value
  return load_config(getattr(args, "config", None), merged)

def prepare_out(path) -> Path:
  out = Path(path)
  try:
    out.mkdir(parents=True, exist_ok=True)
  except OSError as e:
    raise DatasetError(f"cannot create output directory {out}: {e}", code="unwritable") from e
  return out

def write_resolved(out: Path, cfg: RunConfig) -> Path:
  path = out / "resolved.json"
  path.write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
  return path

def require_dir(path, what: str) -> Path:
  directory = Path(path)
  if not directory.is_dir():
    raise DatasetError(f"{what} directory {directory} does not exist", code="missing_file")
  return directory
