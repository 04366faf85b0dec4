import sys
import logging
import argparse
from typing import List, Optional

from app.commands import checks, data, model, pipeline, report
from app.config import get_config
from app.exceptions import PipelineError
from app.logging_config import setup_logging

logger = logging.getLogger(__name__)

def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
    prog="gtn",
    description="GALAR TemporalNet v2 - desk-scale capsule endoscopy temporal pipeline",
  )
  parser.add_argument("--log-level", default=None, help="logging level (default from GTN_LOG_LEVEL or INFO)")
  subparsers = parser.add_subparsers(dest="command", required=True)

  data.register(subparsers)
  model.register(subparsers)
  pipeline.register(subparsers)
  report.register(subparsers)
  checks.register(subparsers)
  return parser

def _one_line(message: str) -> str:
  return " ".join(str(message).split())

def main(argv: Optional[List[str]] = None) -> int:
  parser = build_parser()
  args = parser.parse_args(argv)

  try:
    level = args.log_level or get_config().log_level
  except PipelineError:
    level = "INFO"
  setup_logging(level)

  try:
    logger.debug(f"Running command {args.command}")
    return args.handler(args)
  except PipelineError as e:
    print(f"ERROR {e.code}: {_one_line(e)}", file=sys.stderr)
    return 2
  except ValueError as e:
    print(f"ERROR invalid_argument: {_one_line(e)}", file=sys.stderr)
    return 2
  except Exception as e:
    logger.exception(f"Command {args.command} failed unexpectedly")
    print(f"ERROR internal: {_one_line(e)}", file=sys.stderr)
    return 1

if __name__ == "__main__":
  sys.exit(main())
