"""Exception types shared across the pipeline.

Every error carries a stable short code and a process exit code so the
command line can surface failures as machine-readable JSON.
"""


class PipelineError(Exception):
    code = "Error"
    exit_code = 1


class ConfigError(PipelineError):
    code = "ConfigParse"
    exit_code = 2


class MissingInput(PipelineError):
    code = "MissingInput"
    exit_code = 3


class EmptyDataset(PipelineError):
    code = "EmptyDataset"
    exit_code = 4


class EmptyPool(PipelineError):
    code = "EmptyPool"
    exit_code = 5


class PlacementFailure(PipelineError):
    code = "PlacementFailure"
    exit_code = 6


class NoFeasibleBox(PipelineError):
    code = "NoFeasibleBox"
    exit_code = 7


class EmptyBatch(PipelineError):
    code = "EmptyBatch"
    exit_code = 8


class WrongReference(PipelineError):
    code = "WrongReference"
    exit_code = 9


class InvalidToken(PipelineError):
    code = "InvalidToken"
    exit_code = 10


class LengthMismatch(PipelineError):
    code = "LengthMismatch"
    exit_code = 11


class MissingGroundTruth(PipelineError):
    code = "MissingGroundTruth"
    exit_code = 12


class NoUnambiguousQuery(PipelineError):
    code = "NoUnambiguousQuery"
    exit_code = 13


class HashMismatch(PipelineError):
    code = "HashMismatch"
    exit_code = 14
