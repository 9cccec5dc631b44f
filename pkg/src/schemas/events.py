from datetime import date
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.schemas.raster import PatchId

# -5..+5; everything at or before -6 is the omitted reference
EVENT_BINS: List[int] = list(range(-5, 6))
REFERENCE_BIN = -6


class EventRecord(BaseModel):
    """Georeferenced strike event"""
    model_config = ConfigDict(frozen=True)

    lonlat: Tuple[float, float]
    date: date
    event_type: str = "bombing"


class EventMapping(BaseModel):
    """First event image index per patch plus the count of dropped events by reason"""
    first_event: Dict[PatchId, int] = Field(default_factory=dict)
    drops: Dict[str, int] = Field(default_factory=dict)
    n_events: int = 0

    @property
    def dropped(self) -> int:
        return sum(self.drops.values())


class EventPanel(BaseModel):
    """
    Long-format panel: one observation per (patch, time index).

    `event_time` holds the offset to the patch's first event (NaN for never-treated
    patches); `design` holds one indicator column per entry of EVENT_BINS.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    patch_index: np.ndarray
    time_index: np.ndarray
    outcome: np.ndarray
    event_time: np.ndarray
    design: np.ndarray
    patch_ids: List[PatchId] = Field(default_factory=list)
    bins: List[int] = Field(default_factory=lambda: list(EVENT_BINS))

    @model_validator(mode="after")
    def validate_lengths(self):
        n = len(self.outcome)
        for name in ("patch_index", "time_index", "event_time"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have one entry per observation")
        if self.design.shape != (n, len(self.bins)):
            raise ValueError(f"design must be ({n}, {len(self.bins)})")
        return self

    @property
    def n_obs(self) -> int:
        return len(self.outcome)

    def reordered(self, order: np.ndarray) -> "EventPanel":
        return EventPanel(
            patch_index=self.patch_index[order],
            time_index=self.time_index[order],
            outcome=self.outcome[order],
            event_time=self.event_time[order],
            design=self.design[order],
            patch_ids=self.patch_ids,
            bins=self.bins
        )


class RegressionResult(BaseModel):
    coefficients: Dict[int, float]
    n_obs: int
    converged: bool
    sweeps: int = 0

    @model_validator(mode="after")
    def pin_reference(self):
        self.coefficients.setdefault(REFERENCE_BIN, 0.0)
        return self
