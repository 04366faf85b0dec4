class PipelineError(Exception):
  """Base error for every failure the command line reports as `ERROR <code>: <msg>`"""

  code = "pipeline"

  def __init__(self, message: str, code: str = None):
    super().__init__(message)
    if code:
      self.code = code

  def __str__(self) -> str:
    return self.args[0] if self.args else self.code

class ShapeError(PipelineError):
  code = "shape"

class NonFiniteError(PipelineError, ValueError):
  code = "non_finite"

class TensorFileError(PipelineError):
  code = "tensor_file"

class DatasetError(PipelineError):
  code = "dataset"

class LabelError(DatasetError):
  code = "labels"

class ManifestError(PipelineError):
  code = "manifest"

class StatisticsError(PipelineError):
  code = "statistics"

class ConfigError(PipelineError, ValueError):
  code = "config"

class EvaluationError(PipelineError, ValueError):
  code = "evaluation"

class SegmentError(PipelineError, ValueError):
  code = "segments"
