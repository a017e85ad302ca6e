"""
Custom exceptions for the bitsplit toolkit.
"""
from typing import Optional


class BitSplitError(Exception):
    """Base exception for toolkit errors."""
    pass


class ShapeError(BitSplitError):
    """Raised when tensor shapes do not agree."""
    def __init__(self, message: str, left: Optional[tuple] = None, right: Optional[tuple] = None):
        self.left = left
        self.right = right
        detail = f" ({left} vs {right})" if left is not None or right is not None else ""
        super().__init__(f"{message}{detail}")


class GraphError(BitSplitError):
    """Raised when a gradient is requested through an unrecorded node."""
    def __init__(self, message: str):
        super().__init__(f"Autograd graph error: {message}")


class NonFiniteError(BitSplitError):
    """Raised when a tensor contains NaN or infinite values."""
    def __init__(self, what: str):
        self.what = what
        super().__init__(f"Non-finite values in {what}")


class QuantizerStateError(BitSplitError):
    """Raised when a learned quantizer step size is not strictly positive."""
    def __init__(self, step: float):
        self.step = step
        super().__init__(f"Quantizer step size must be positive, got {step}")


class ConfigurationError(BitSplitError):
    """Raised for invalid model, precision or experiment settings."""
    pass


class DegenerateTernaryError(BitSplitError):
    """Raised when a ternary matrix has no nonzero entries and cannot be split."""
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"Ternary matrix '{tag}' has an empty support set and cannot be split")


class SplitMismatchError(BitSplitError):
    """Raised when splitting changes predictions that are not near-ties."""
    def __init__(self, flipped: int, total: int, max_logit_diff: float):
        self.flipped = flipped
        self.total = total
        self.max_logit_diff = max_logit_diff
        super().__init__(
            f"Split changed {flipped} of {total} predictions (max logit difference {max_logit_diff:.3e})"
        )


class DivergenceError(BitSplitError):
    """Raised when the training loss stops being finite."""
    def __init__(self, stage: str, step: int, loss: float, lr: float):
        self.stage = stage
        self.step = step
        self.loss = loss
        self.lr = lr
        super().__init__(f"Training diverged in stage '{stage}' at step {step} (loss={loss}, lr={lr:.3g})")


class BudgetError(BitSplitError):
    """Raised for a negative budget or a plan that does not fit its budget."""
    def __init__(self, size: float, budget: float):
        self.size = size
        self.budget = budget
        super().__init__(f"Size {size} exceeds budget {budget}")


class UnknownTagError(BitSplitError):
    """Raised when a matrix or part tag does not exist in the model."""
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"Unknown parameter tag '{tag}'")


class TaskError(BitSplitError):
    """Raised when a task cannot be generated or loaded."""
    pass


class UnknownTaskError(TaskError):
    """Raised for an unsupported synthetic task kind."""
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"Unknown task kind '{kind}'")


class MalformedRowError(TaskError):
    """Raised when a TSV row cannot be parsed."""
    def __init__(self, path: str, line: int, reason: str):
        self.path = path
        self.line = line
        self.reason = reason
        super().__init__(f"{path}:{line}: {reason}")


class MissingBaselineError(BitSplitError):
    """Raised when sensitivity gains are requested without a fully quantized baseline."""
    def __init__(self):
        super().__init__("Sensitivity measurement requires a fully quantized baseline result")


class InvalidPathError(BitSplitError):
    """Raised when path traversal or an invalid run/artifact name is detected."""
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"Invalid or unsafe path: {path}")


class ArtifactNotFoundError(BitSplitError):
    """Raised when an artifact does not exist in a run."""
    def __init__(self, run: str, key: str):
        self.run = run
        self.key = key
        super().__init__(f"Artifact '{key}' not found in run '{run}'")


class CheckpointFormatError(BitSplitError):
    """Raised when a checkpoint container cannot be decoded."""
    def __init__(self, reason: str):
        super().__init__(f"Malformed checkpoint: {reason}")
