from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_MAX = 5


def censor_mask(followup_years: float, years_to_cancer: int | None = None, t_max: int = T_MAX) -> np.ndarray:
    """Per-horizon observation mask.

    Horizon ``t`` (1-based) counts when follow-up reaches ``min(t, t_max)`` or
    the patient is diagnosed within ``t_max`` years.
    """
    if followup_years < 0:
        raise ValueError("followup_years must be >= 0")
    if years_to_cancer is not None and years_to_cancer < 0:
        raise ValueError("years_to_cancer must be >= 0")
    if years_to_cancer is not None and years_to_cancer <= t_max:
        return np.ones(t_max)
    t = np.arange(1, t_max + 1)
    return (followup_years >= np.minimum(t, t_max)).astype(np.float64)


def outcome_vector(years_to_cancer: int | None, t_max: int = T_MAX) -> np.ndarray:
    """``y(t) = 1`` iff diagnosed within ``t`` years; a same-year diagnosis counts from t=1."""
    t = np.arange(1, t_max + 1)
    if years_to_cancer is None:
        return np.zeros(t_max)
    return (years_to_cancer <= t).astype(np.float64)


@dataclass(frozen=True)
class SurvivalLabel:
    y: np.ndarray
    delta: np.ndarray
    followup_years: float
    years_to_cancer: int | None = None

    @property
    def t_max(self) -> int:
        return len(self.y)

    @classmethod
    def from_times(cls, followup_years, years_to_cancer=None, t_max: int = T_MAX) -> "SurvivalLabel":
        return cls(
            outcome_vector(years_to_cancer, t_max),
            censor_mask(followup_years, years_to_cancer, t_max),
            followup_years,
            years_to_cancer,
        )

    @property
    def event_horizon(self) -> int | None:
        """1-based first horizon with ``y = 1``; None for no event within ``t_max``."""
        hits = np.flatnonzero(self.y > 0)
        return int(hits[0]) + 1 if hits.size else None

    def validate(self) -> None:
        if np.any(np.diff(self.y) < 0):
            raise ValueError("y must be nondecreasing in t")
        if not np.all(np.isin(self.delta, (0.0, 1.0))):
            raise ValueError("delta must be binary")
        if np.any((self.y > 0) & (self.delta == 0)):
            raise ValueError("y(t)=1 requires delta(t)=1")


@dataclass
class ExamPair:
    """A current exam with its prior, the screening gap and the outcome label."""

    current: np.ndarray
    prior: np.ndarray
    gap_months: float
    label: SurvivalLabel
    patient_id: str
    exam_id: str
    density_category: str | None = None

    def __post_init__(self):
        if self.gap_months <= 0:
            raise ValueError("gap_months must be > 0")
        if np.shape(self.current) != np.shape(self.prior):
            raise ValueError("current and prior images differ in shape")
        self.label.validate()
