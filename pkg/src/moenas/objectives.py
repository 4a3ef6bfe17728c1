"""The bi-objective fitness: expected segmentation error and model size.

The error objective combines training-set Dice, validation-set Dice and a
partial-training term rewarding candidates whose best validation score
arrives late in the epoch budget (a proxy for expected improvement under
longer training). The size objective is the raw trainable parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    """What an evaluator reports for one trained candidate."""

    dsc_train: float
    dsc_val: float
    e_max: int
    param_count: int

    def __post_init__(self):
        if not (0.0 <= self.dsc_train <= 1.0):
            raise ValueError(f"dsc_train outside [0, 1]: {self.dsc_train}")
        if not (0.0 <= self.dsc_val <= 1.0):
            raise ValueError(f"dsc_val outside [0, 1]: {self.dsc_val}")
        if self.e_max < 0:
            raise ValueError(f"e_max must be >= 0: {self.e_max}")
        if self.param_count < 0:
            raise ValueError(f"param_count must be >= 0: {self.param_count}")

    def to_json(self) -> dict:
        return {
            "dsc_train": self.dsc_train,
            "dsc_val": self.dsc_val,
            "e_max": self.e_max,
            "param_count": self.param_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalResult":
        return cls(
            dsc_train=float(obj["dsc_train"]),
            dsc_val=float(obj["dsc_val"]),
            e_max=int(obj["e_max"]),
            param_count=int(obj["param_count"]),
        )


class ObjectiveVector(NamedTuple):
    f1: float  # expected segmentation error (lower is better)
    f2: float  # parameter count as a real


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", None)
    if isinstance(data, np.ndarray):
        return data
    return np.asarray(x)


def dice_coefficient(pred, truth) -> float:
    """Dice overlap 2|P∩T| / (|P|+|T|) over voxels; two empty masks count as 1."""
    p = _as_array(pred).astype(bool)
    t = _as_array(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    sp = int(np.count_nonzero(p))
    st = int(np.count_nonzero(t))
    if sp + st == 0:
        return 1.0
    inter = int(np.count_nonzero(p & t))
    return 2.0 * inter / (sp + st)


def f1_objective(result: EvalResult, alpha: float = 0.25, beta: float = 0.25,
                 budget_epochs: int = 120) -> float:
    """alpha*(1 - dsc_train) + (1 - dsc_val) + beta*(E - e_max)/E."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha outside [0, 1]: {alpha}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta outside [0, 1]: {beta}")
    if budget_epochs < 1:
        raise ValueError(f"budget_epochs must be >= 1: {budget_epochs}")
    if result.e_max > budget_epochs:
        raise ValueError(f"e_max {result.e_max} exceeds budget {budget_epochs}")
    return (
        alpha * (1.0 - result.dsc_train)
        + (1.0 - result.dsc_val)
        + beta * (budget_epochs - result.e_max) / budget_epochs
    )


def objective_vector(result: EvalResult, alpha: float = 0.25, beta: float = 0.25,
                     budget_epochs: int = 120) -> ObjectiveVector:
    return ObjectiveVector(
        f1=f1_objective(result, alpha, beta, budget_epochs),
        f2=float(result.param_count),
    )
