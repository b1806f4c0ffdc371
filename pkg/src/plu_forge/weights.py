"""Flat parameter vectors exchanged with model backends, and the EMA update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    schema_tag: str = "default"

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("weight vector has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def compatible(self, other: "WeightVector") -> bool:
        return len(self) == len(other) and self.schema_tag == other.schema_tag


def ema_update(teacher: WeightVector, student: WeightVector, decay: float) -> WeightVector:
    """``decay * teacher + (1 - decay) * student``, elementwise."""
    if not teacher.compatible(student):
        raise ValueError(
            f"incompatible weights: {len(teacher)}/{teacher.schema_tag!r} "
            f"vs {len(student)}/{student.schema_tag!r}"
        )
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must be in [0, 1], got {decay}")
    if decay == 1.0:
        return teacher
    if decay == 0.0:
        return WeightVector(student.values, teacher.schema_tag)
    return WeightVector(decay * teacher.values + (1.0 - decay) * student.values, teacher.schema_tag)
