"""
Exception hierarchy for natlab.

Every error raised on purpose by the package derives from NatLabError so
scripts can report it without a traceback.
"""
from typing import Optional, Sequence


class NatLabError(Exception):
    """Base class for all natlab errors."""


class ShapeError(NatLabError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class ConfigError(NatLabError, ValueError):
    """Invalid or unknown configuration value."""


class ConfigMismatchError(ConfigError):
    """Two artifacts that must share a configuration do not."""


class CorpusError(NatLabError, ValueError):
    """Malformed parallel corpus or vocabulary file."""


class CheckpointError(NatLabError, ValueError):
    """Unreadable checkpoint or unsupported checkpoint version."""


class NonFiniteLossError(NatLabError, RuntimeError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, step: int, dump_path: Optional[str] = None):
        self.step = step
        self.dump_path = dump_path
        message = f"Non-finite loss at step {step}"
        if dump_path:
            message += f"; offending batch written to {dump_path}"
        super().__init__(message)
