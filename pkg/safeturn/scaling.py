"""Per-feature min-max normalization with stored statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_stored(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class MinMaxScaler:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, data) -> "MinMaxScaler":
        """Statistics are rounded to float32, the precision checkpoints store."""
        data = np.asarray(data, dtype=np.float64)
        return cls(minimum=_as_stored(data.min(axis=0)), maximum=_as_stored(data.max(axis=0)))

    @property
    def span(self) -> np.ndarray:
        span = self.maximum - self.minimum
        # constant features map to 0
        return np.where(span > 0, span, 1.0)

    def transform(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.minimum) / self.span

    def inverse_transform(self, data) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) * self.span + self.minimum

    def to_tensors(self, prefix: str) -> dict:
        return {f"{prefix}/min": np.asarray(self.minimum, dtype=np.float32),
                f"{prefix}/max": np.asarray(self.maximum, dtype=np.float32)}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str) -> "MinMaxScaler":
        return cls(minimum=np.asarray(tensors[f"{prefix}/min"], dtype=np.float64),
                   maximum=np.asarray(tensors[f"{prefix}/max"], dtype=np.float64))
