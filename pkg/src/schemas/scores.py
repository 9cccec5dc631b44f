from datetime import date
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.exceptions import PatchLookupError
from src.schemas.raster import PatchId


class ScorePanel(BaseModel):
    """
    Dense per-patch, per-post-date scores of one city.

    Arrays are (dates, rows, cols); cells outside `mask` hold NaN. `stage2` and
    `binary` stay None until the smoothing stage has run.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    city_id: str
    dates: List[date] = Field(..., min_length=1)
    mask: np.ndarray = Field(..., description="bool (rows, cols): included patches")
    stage1: np.ndarray = Field(..., description="float64 (dates, rows, cols) CNN scores")
    stage2: Optional[np.ndarray] = Field(None, description="float64 (dates, rows, cols) forest scores")
    binary: Optional[np.ndarray] = Field(None, description="int8 (dates, rows, cols) calibrated calls")

    @model_validator(mode="after")
    def validate_shapes(self):
        expected = (len(self.dates),) + self.mask.shape
        for name in ("stage1", "stage2", "binary"):
            values = getattr(self, name)
            if values is not None and values.shape != expected:
                raise ValueError(f"{name} has shape {values.shape}, expected {expected}")
        return self

    @property
    def rows(self) -> int:
        return self.mask.shape[0]

    @property
    def cols(self) -> int:
        return self.mask.shape[1]

    @property
    def is_smoothed(self) -> bool:
        return self.stage2 is not None and self.binary is not None

    def date_index(self, when: date) -> int:
        try:
            return self.dates.index(when)
        except ValueError:
            raise PatchLookupError(f"Date {when} is not in the score panel of {self.city_id}")

    def stage1_score(self, patch_id: PatchId, when: date) -> float:
        row, col = patch_id
        if not self.mask[row, col]:
            raise PatchLookupError(f"Patch {patch_id} has no score in {self.city_id}")
        return float(self.stage1[self.date_index(when), row, col])

    def with_smoothing(self, stage2: np.ndarray, binary: np.ndarray) -> "ScorePanel":
        return self.model_copy(update={"stage2": stage2, "binary": binary})
