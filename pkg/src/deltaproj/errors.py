"""Exception hierarchy shared by every module."""
from __future__ import annotations

import contextlib


class DeltaProjError(Exception):
    """Base class. ``stage`` is filled in when a pipeline stage re-raises."""

    stage: str | None = None


class DimensionError(DeltaProjError, ValueError):
    pass


class ConfigError(DeltaProjError, ValueError):
    pass


class FormatError(DeltaProjError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DeltaProjError, ArithmeticError):
    pass


class EvaluationError(DeltaProjError, ArithmeticError):
    pass


class StateError(DeltaProjError, RuntimeError):
    pass


@contextlib.contextmanager
def annotate_stage(name: str):
    """Prefix errors raised inside the block with the stage name (innermost wins)."""
    try:
        yield
    except DeltaProjError as exc:
        if exc.stage is None:
            exc.stage = name
            if exc.args:
                exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
            else:
                exc.args = (f"[{name}]",)
        raise
