"""Error hierarchy for the MPDiT library.

Every error carries a short ``category`` string so the CLI can report
failures in a machine-parsable way (``mpdit: error[<category>]: ...``).
"""

from __future__ import annotations

from typing import Optional


class MpditError(Exception):
    """Base class for all library errors."""

    category: str = "error"


class DimensionError(MpditError, ValueError):
    """Shapes or dimensions do not agree."""

    category = "dimension"


class ConfigError(MpditError, ValueError):
    """A configuration value violates its contract."""

    category = "config"

    def __init__(self, field: str, message: str, line: Optional[int] = None) -> None:
        self.field = field
        self.message = message
        self.line = line
        where = f"{field}" if line is None else f"line {line}: {field}"
        super().__init__(f"{where}: {message}" if field else message)


class NonFiniteError(MpditError, FloatingPointError):
    """An operation produced NaN or Inf."""

    category = "non_finite"

    def __init__(self, op: str, step: Optional[int] = None, detail: str = "") -> None:
        self.op = op
        self.step = step
        msg = f"non-finite values produced by {op}"
        if step is not None:
            msg += f" at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class LabelError(MpditError, IndexError):
    """Class index outside [0, C]."""

    category = "label"


class StructureError(MpditError, ValueError):
    """Two parameter trees are not structurally identical."""

    category = "structure"


class ContainerError(MpditError):
    """Base class for tensor-container decoding failures."""

    category = "container"
    code = "container"


class BadMagicError(ContainerError):
    code = "bad_magic"


class UnsupportedVersionError(ContainerError):
    code = "bad_version"


class TruncatedFileError(ContainerError):
    code = "truncated"


class CheckpointMismatchError(MpditError):
    """A checkpoint was written by an incompatible run config."""

    category = "checkpoint"

    def __init__(self, fields: list[str]) -> None:
        self.fields = fields
        super().__init__("checkpoint config mismatch in: " + ", ".join(fields))


class GradcheckError(MpditError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""

    category = "gradcheck"

    def __init__(self, worst: float, tolerance: float) -> None:
        self.worst = worst
        self.tolerance = tolerance
        super().__init__(f"max relative error {worst:.3e} exceeds {tolerance:.0e}")
