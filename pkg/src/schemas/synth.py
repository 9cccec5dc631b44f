from datetime import date, timedelta
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.schemas.raster import GeoReference


class Rect(BaseModel):
    """Pixel rectangle [row0, row1) x [col0, col1)"""
    model_config = ConfigDict(frozen=True)

    row0: int
    col0: int
    row1: int
    col1: int

    def overlaps(self, other: "Rect") -> bool:
        return not (self.row1 <= other.row0 or other.row1 <= self.row0
                    or self.col1 <= other.col0 or other.col1 <= self.col0)

    def contains(self, row: float, col: float) -> bool:
        return self.row0 <= row < self.row1 and self.col0 <= col < self.col1


class Building(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    footprint: Rect
    base_color: Tuple[int, int, int]
    cell: Tuple[int, int] = Field(..., description="Lattice cell (row, col) holding the building")

    @property
    def centroid(self) -> Tuple[float, float]:
        """(row, col) pixel coordinates of the footprint center"""
        f = self.footprint
        return (f.row0 + f.row1) / 2.0, (f.col0 + f.col1) / 2.0


class CityModel(BaseModel):
    """Procedural city with a known destruction schedule (building id -> date index)"""
    model_config = ConfigDict(frozen=True)

    city_id: str
    extent: int = Field(..., gt=0, description="Side length in pixels")
    cell_size: int = Field(32, gt=0)
    buildings: List[Building]
    streets: List[Rect] = Field(default_factory=list)
    parks: List[Rect] = Field(default_factory=list)
    no_analysis_zone: Optional[Rect] = None
    destruction_schedule: Dict[int, int] = Field(default_factory=dict)
    seed: int
    date_count: int = Field(22, ge=1)
    geo: GeoReference
    start_date: date = date(2013, 1, 1)
    date_step_days: int = Field(30, ge=1)

    @model_validator(mode="after")
    def validate_schedule(self):
        ids = {b.id for b in self.buildings}
        for building_id, index in self.destruction_schedule.items():
            if building_id not in ids:
                raise ValueError(f"schedule names unknown building {building_id}")
            if not 1 <= index < self.date_count:
                raise ValueError(f"destruction index {index} outside [1, {self.date_count})")
        return self

    def date_of(self, index: int) -> date:
        return self.start_date + timedelta(days=index * self.date_step_days)

    def image_dates(self) -> List[date]:
        return [self.date_of(i) for i in range(self.date_count)]

    def is_destroyed(self, building_id: int, date_index: int) -> bool:
        scheduled = self.destruction_schedule.get(building_id)
        return scheduled is not None and date_index >= scheduled

    def building(self, building_id: int) -> Building:
        return self.buildings[building_id]


class RenderSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    date_count: int = Field(22, ge=1, description="Rasters including the pre image at index 0")
    annotation_date_indices: List[int] = Field(default_factory=lambda: [6, 11, 16, 21])
    illumination_shift: float = Field(0.08, ge=0, description="Per-date gain/offset jitter amplitude")
    noise_sigma: float = Field(4.0, ge=0, description="Additive Gaussian pixel noise (intensity units)")
    rubble_fragments: int = Field(45, ge=1, description="Debris fragments per destroyed building")
    rubble_darkening: float = Field(0.6, gt=0, le=1, description="Gray level factor under the debris")

    @field_validator("annotation_date_indices")
    @classmethod
    def sort_indices(cls, v):
        return sorted(set(v))

    @model_validator(mode="after")
    def validate_indices(self):
        for index in self.annotation_date_indices:
            if not 0 <= index < self.date_count:
                raise ValueError(f"annotation index {index} outside [0, {self.date_count})")
        return self
