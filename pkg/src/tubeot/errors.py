"""Exception hierarchy.

Every failure the CLI reports maps to one of these classes, and each class
carries the process exit code it produces. Library code raises the most specific
class it can; callers that only care about the category catch the base.
"""

from __future__ import annotations


class TubeotError(RuntimeError):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1


class ConfigError(TubeotError, ValueError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor dimensions or indices that do not fit together."""


class DegenerateMaskError(ConfigError):
    """A mask partition with an empty masked or visible side."""


class DataIOError(TubeotError):
    """A dataset, manifest, checkpoint or feature store that cannot be read or written."""

    exit_code = 3


class FeatureLookupError(DataIOError, KeyError):
    """A clip id missing from a feature store."""

    def __str__(self) -> str:
        # KeyError quotes its argument; this is a message, not a key.
        return str(self.args[0]) if self.args else ""


class NumericError(TubeotError):
    """Non-finite values in scores, activations or losses.

    ``step`` is the optimizer step at which training stopped, when the error
    comes from the trainer.
    """

    exit_code = 4

    def __init__(self, message: str, *, step: int | None = None) -> None:
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TargetError(NumericError):
    """Target rows that are not probability distributions."""
