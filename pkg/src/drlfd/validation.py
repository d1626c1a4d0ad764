"""Exceptions and input-checking helpers shared across the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    """An input violates a documented invariant.

    ``field`` and ``rule`` name what was checked; ``trial_id`` and ``cell``
    locate dataset violations.
    """

    def __init__(self, message: str, field: Optional[str] = None, rule: Optional[str] = None,
                 trial_id: Optional[str] = None, cell: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.rule = rule
        self.trial_id = trial_id
        self.cell = cell


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str
    message: str
    trial_id: Optional[str] = None
    cell: Optional[int] = None

    def __str__(self):
        where = []
        if self.trial_id is not None:
            where.append(f"trial {self.trial_id}")
        if self.cell is not None:
            where.append(f"cell {self.cell}")
        loc = ", ".join(where)
        return f"[{loc}] {self.field}/{self.rule}: {self.message}" if loc else f"{self.field}/{self.rule}: {self.message}"

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "cell": self.cell, "field": self.field,
                "rule": self.rule, "message": self.message}


class TrialValidationError(ValidationError):
    """Raised by trial parsing; carries every violation found."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        first = self.violations[0]
        more = f" (+{len(self.violations) - 1} more)" if len(self.violations) > 1 else ""
        super().__init__(str(first) + more, field=first.field, rule=first.rule,
                         trial_id=first.trial_id, cell=first.cell)


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated, or does not match the expected config."""


class NotFittedError(ValueError, AttributeError):
    pass


def check_state_array(X, width: int = 7, name: str = "X", tol: float = 1e-6) -> np.ndarray:
    """Validate an ``(n, width)`` array of stacked State7 blocks."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != width or width % 7:
        raise ValidationError(f"{name}: expected shape (n, {width}), got {X.shape}", field=name, rule="shape")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name}: non-finite values", field=name, rule="finite")
    for k in range(width // 7):
        n = np.linalg.norm(X[:, 7 * k:7 * k + 4], axis=1)
        if np.any(np.abs(n - 1.0) > tol):
            raise ValidationError(f"{name}: quaternion block {k} not unit-norm", field=name, rule="norm")
    return X


def check_finite(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name}: non-finite values", field=name, rule="finite")
    return x
