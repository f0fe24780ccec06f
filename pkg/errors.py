"""
LatentFormer Errors
===================

Exception hierarchy shared by every module. Each class carries the exit code the
command line reports when it escapes to the top level.
"""

from typing import Optional


class LatentFormerError(Exception):
    """Base class for all errors raised by this package."""
    exit_code = 1


class DimensionError(LatentFormerError, ValueError):
    """Tensor or array shapes violate an operation's contract."""
    exit_code = 1


class ParameterError(LatentFormerError, ValueError):
    """An operator argument is outside its valid range."""
    exit_code = 1


class ContractError(LatentFormerError):
    """A pre- or post-condition does not hold."""
    exit_code = 1


class CapacityError(LatentFormerError):
    """Agent count or enumeration size exceeds a configured limit."""
    exit_code = 4


class ConfigError(LatentFormerError, ValueError):
    """Configuration document is invalid or inconsistent with the data."""
    exit_code = 4


class FormatError(LatentFormerError, ValueError):
    """A scene-set, checkpoint or prediction file is malformed."""
    exit_code = 5

    def __init__(self, message: str, line: Optional[int] = None, scene_id: Optional[str] = None):
        self.line = line
        self.scene_id = scene_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if scene_id is not None:
            where.append(f"scene {scene_id}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class GenerationError(LatentFormerError):
    """The synthetic generator could not place an agent."""
    exit_code = 1


class TrainingError(LatentFormerError):
    """Training aborted; `dump_path` points at the diagnostic dump."""
    exit_code = 6

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (dump: {dump_path})")


class UsageError(LatentFormerError):
    """Command-line usage is invalid: unknown flag, missing argument or bad value."""
    exit_code = 2


class SelftestFailure(LatentFormerError):
    """At least one self-test check failed."""
    exit_code = 7
