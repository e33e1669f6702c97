"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
TrainingDivergedError -> 4.
"""


class LipreadError(Exception):
    """Base class for all package errors."""


class ShapeError(LipreadError):
    """Operand shapes or sequence lengths do not conform."""


class NumericError(LipreadError):
    """Non-finite values where finite ones are required."""


class ContractError(LipreadError):
    """An API was used outside its contract (e.g. backward on a non-scalar)."""


class VocabularyError(LipreadError):
    """Unknown symbol or token id outside the vocabulary."""


class DataError(LipreadError):
    """Corpus or input data unusable (empty, too small, infeasible target)."""


class ConfigError(LipreadError):
    """Bad configuration: unknown keys, missing checkpoints, hash mismatch."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")
