"""
Errors - Exception hierarchy shared by every VerifScope package
Each category carries the process exit code main.py reports for it
"""

from typing import Optional


class VerifScopeError(Exception):
    """Base class for all errors raised by VerifScope library code."""

    exit_code = 1
    category = "error"


class ConfigError(VerifScopeError):
    """Invalid, missing or unsupported run configuration."""

    exit_code = 2
    category = "config"


class ArgumentError(ConfigError):
    """An operation was called with arguments outside its contract."""

    category = "argument"


class DependencyError(VerifScopeError):
    """A stage input artifact is missing."""

    exit_code = 3
    category = "dependency"

    def __init__(self, artifact: str, producer: str):
        """
        Args:
            artifact: Path or name of the missing artifact
            producer: Subcommand that produces it
        """
        super().__init__(f"Missing artifact {artifact}; run '{producer}' first")
        self.artifact = artifact
        self.producer = producer


class DataError(VerifScopeError):
    """Input data does not satisfy an operation's preconditions."""

    exit_code = 4
    category = "data"


class ShapeError(DataError):
    category = "shape"


class LengthError(DataError):
    category = "length"


class VocabularyError(DataError):
    category = "vocabulary"


class FormatError(DataError):
    """A manifest or container is malformed."""

    category = "format"


class ArtifactIOError(DataError, OSError):
    """A blob or chunk on disk is truncated or corrupt."""

    category = "io"

    def __init__(self, message: str, chunk: Optional[str] = None):
        super().__init__(message)
        self.chunk = chunk


class PlanError(DataError):
    category = "plan"


class ParseError(DataError):
    category = "parse"


class EvaluationError(DataError):
    category = "evaluation"


class GenerationError(DataError):
    category = "generation"


class NumericalError(VerifScopeError):
    exit_code = 5
    category = "numerical"


class DegenerateInputError(NumericalError):
    category = "degenerate"


class TrainingError(NumericalError):
    """Training diverged."""

    category = "training"

    def __init__(self, step: int, message: str):
        super().__init__(f"Training diverged at step {step}: {message}")
        self.step = step
