from datetime import date
from enum import Enum, IntEnum
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.schemas.raster import PatchId


class DamageClass(str, Enum):
    MODERATE = "Moderate"
    SEVERE = "Severe"
    DESTROYED = "Destroyed"


class LabelClass(IntEnum):
    """Patch label codes as stored in label arrays"""
    UNKNOWN = -1
    INTACT = 0
    DESTROYED = 1

    @property
    def export_name(self) -> str:
        return self.name.lower()


class SplitName(str, Enum):
    TRAIN = "train"
    TEST = "test"


class AnnotationBinding(str, Enum):
    EXACT = "exact"
    NEAREST = "nearest"


class Annotation(BaseModel):
    """Point damage annotation"""
    model_config = ConfigDict(frozen=True)

    lonlat: Tuple[float, float]
    date: date
    damage_class: DamageClass


class PatchLabelMap(BaseModel):
    """Labels of every grid window at one annotation date; codes outside `mask` are meaningless"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    date: date
    codes: np.ndarray = Field(..., description="int8 (rows, cols) LabelClass codes")
    mask: np.ndarray = Field(..., description="bool (rows, cols): patch has an entry")

    def get(self, patch_id: PatchId) -> Optional[LabelClass]:
        row, col = patch_id
        if not self.mask[row, col]:
            return None
        return LabelClass(int(self.codes[row, col]))

    def as_dict(self) -> Dict[PatchId, LabelClass]:
        return {
            (int(r), int(c)): LabelClass(int(self.codes[r, c]))
            for r, c in zip(*np.nonzero(self.mask))
        }


class LabelPanel(BaseModel):
    """(patch, image date) -> Destroyed / Intact / Unknown after temporal propagation"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    city_id: str
    image_dates: List[date]
    annotation_dates: List[date]
    codes: np.ndarray = Field(..., description="int8 (dates, rows, cols) LabelClass codes")
    mask: np.ndarray = Field(..., description="bool (rows, cols): patch has entries")

    @model_validator(mode="after")
    def validate_shape(self):
        if self.codes.shape[0] != len(self.image_dates):
            raise ValueError("codes must have one layer per image date")
        if self.codes.shape[1:] != self.mask.shape:
            raise ValueError("codes and mask disagree on grid shape")
        return self

    def label(self, patch_id: PatchId, when: date) -> LabelClass:
        row, col = patch_id
        if not self.mask[row, col]:
            raise KeyError(patch_id)
        return LabelClass(int(self.codes[self.image_dates.index(when), row, col]))

    def entries(self) -> Iterator[Tuple[PatchId, date, LabelClass]]:
        rows, cols = np.nonzero(self.mask)
        for t, when in enumerate(self.image_dates):
            for r, c in zip(rows, cols):
                yield (int(r), int(c)), when, LabelClass(int(self.codes[t, r, c]))

    def labeled_count(self) -> int:
        return int(np.sum((self.codes != LabelClass.UNKNOWN) & self.mask[None]))

    def destroyed_count(self) -> int:
        return int(np.sum((self.codes == LabelClass.DESTROYED) & self.mask[None]))


class SplitAssignment(BaseModel):
    """Patch-level train/test split, identical for every date"""
    model_config = ConfigDict(frozen=True)

    assignment: Dict[PatchId, SplitName]
    train_fraction: float = Field(0.7, gt=0, lt=1)
    seed: int

    def ids(self, split: SplitName) -> List[PatchId]:
        return sorted(pid for pid, name in self.assignment.items() if name == split)

    def is_train(self, patch_id: PatchId) -> bool:
        return self.assignment.get(patch_id) == SplitName.TRAIN


class SampleKey(NamedTuple):
    city_id: str
    row: int
    col: int
    date_index: int


class LabeledSample(NamedTuple):
    key: SampleKey
    label: LabelClass
