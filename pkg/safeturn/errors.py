"""Exception hierarchy shared by every safeturn module."""

from __future__ import annotations


class SafeTurnError(Exception):
    """Base class for all errors raised by safeturn."""


# ============================================================
# tensor-nn
# ============================================================

class ShapeMismatchError(SafeTurnError):
    def __init__(self, layer: str, expected, got):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer '{layer}': expected shape {expected}, got {got}")


class NonFiniteError(SafeTurnError):
    """An input or parameter holds NaN or Inf."""


class StaleTapeError(SafeTurnError):
    """backward() was called with a tape recorded against other weights."""


class KeyMismatchError(SafeTurnError):
    def __init__(self, missing, unexpected):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        super().__init__(f"gradient keys differ: missing={self.missing} unexpected={self.unexpected}")


class CheckpointFormatError(SafeTurnError):
    """A checkpoint file is truncated or is not an SDQN file."""


# ============================================================
# configuration / harness
# ============================================================

class ConfigError(SafeTurnError):
    """Unknown key or unparsable value in a config file."""


class MissingModelError(SafeTurnError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"required checkpoint not found: {self.path}")


class NonConvergenceError(SafeTurnError):
    def __init__(self, metric: str, value: float, threshold: float):
        self.metric = metric
        self.value = value
        self.threshold = threshold
        super().__init__(f"{metric} = {value:.4f} does not meet threshold {threshold:.4f}")


# ============================================================
# simulation / models / agent
# ============================================================

class StepAfterTerminalError(SafeTurnError):
    """step() called on a world that already reached a terminal state."""


class MalformedWindowError(SafeTurnError):
    """Observation window is not a finite 3 x 4 matrix."""


class EmptyBufferError(SafeTurnError):
    """Sampling requested from a replay buffer with no transitions."""


class SampleBeforeLearnStartError(SafeTurnError):
    def __init__(self, size: int, learn_start: int):
        self.size = size
        self.learn_start = learn_start
        super().__init__(f"buffer holds {size} transitions, sampling starts at {learn_start}")


class TrajectoryLengthError(SafeTurnError):
    """Ego and pedestrian rollouts cover a different number of virtual steps."""
