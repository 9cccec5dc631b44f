from datetime import date
from enum import Enum
from typing import FrozenSet, List, Tuple

import numpy as np
from affine import Affine
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PatchId = Tuple[int, int]


class AOIKind(str, Enum):
    POPULATED_AREA = "PopulatedArea"
    NO_ANALYSIS_ZONE = "NoAnalysisZone"


class GeoReference(BaseModel):
    """Axis-aligned, north-up georeference of a raster"""
    model_config = ConfigDict(frozen=True)

    origin_lon: float = Field(..., description="Longitude of the top-left pixel corner")
    origin_lat: float = Field(..., description="Latitude of the top-left pixel corner")
    pixel_deg: float = Field(..., gt=0, description="Pixel size in degrees (both axes)")

    @property
    def transform(self) -> Affine:
        # pixel (col, row) -> (lon, lat); latitude decreases downwards
        return Affine(self.pixel_deg, 0.0, self.origin_lon, 0.0, -self.pixel_deg, self.origin_lat)

    def to_pixel(self, lon: float, lat: float) -> Tuple[float, float]:
        """Inverse transform: (lon, lat) -> fractional (col, row)"""
        a = self.transform
        return (lon - a.c) / a.a, (lat - a.f) / a.e


class GeoRaster(BaseModel):
    """One dated RGB image of a city"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    channels: int = Field(3, description="RGB")
    pixels: np.ndarray = Field(..., description="uint8 array of shape (height, width, channels)")
    geo: GeoReference
    capture_date: date
    city_id: str

    @model_validator(mode="after")
    def validate_pixels(self):
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"pixels shape {self.pixels.shape} does not match "
                f"{(self.height, self.width, self.channels)}"
            )
        self.pixels.setflags(write=False)
        return self

    @property
    def transform(self) -> Affine:
        return self.geo.transform


class AreaOfInterest(BaseModel):
    """Populated-area boundary or a no-analysis zone, as lon/lat rings"""
    model_config = ConfigDict(frozen=True)

    kind: AOIKind
    rings: List[List[Tuple[float, float]]] = Field(..., min_length=1)

    @field_validator("rings")
    @classmethod
    def validate_rings(cls, rings):
        from shapely.geometry import LinearRing

        for index, ring in enumerate(rings):
            if len(ring) < 4:
                raise ValueError(f"ring {index} has {len(ring)} vertices, at least 4 required")
            if tuple(ring[0]) != tuple(ring[-1]):
                raise ValueError(f"ring {index} is not closed (first vertex != last vertex)")
            if not LinearRing(ring).is_simple:
                raise ValueError(f"ring {index} is self-intersecting")
        return rings


class PatchGrid(BaseModel):
    """Non-overlapping patch tiling of a city's populated area"""
    model_config = ConfigDict(frozen=True)

    city_id: str
    patch_size: int = Field(64, gt=0)
    rows: int = Field(..., ge=1)
    cols: int = Field(..., ge=1)
    included: FrozenSet[PatchId]
    no_analysis: FrozenSet[PatchId] = frozenset()

    @model_validator(mode="after")
    def validate_membership(self):
        for row, col in self.included:
            if not (0 <= row < self.rows and 0 <= col < self.cols):
                raise ValueError(f"included patch {(row, col)} outside a {self.rows}x{self.cols} grid")
        if not self.no_analysis <= self.included:
            raise ValueError("no_analysis patches must be a subset of included patches")
        return self

    def window(self, patch_id: PatchId) -> Tuple[slice, slice]:
        """Pixel window (row slice, col slice) of a patch"""
        row, col = patch_id
        size = self.patch_size
        return slice(row * size, row * size + size), slice(col * size, col * size + size)

    def sorted_ids(self) -> List[PatchId]:
        return sorted(self.included)

    def analysis_ids(self) -> List[PatchId]:
        """Included patches outside every no-analysis zone"""
        return sorted(self.included - self.no_analysis)

    def included_mask(self) -> np.ndarray:
        mask = np.zeros((self.rows, self.cols), dtype=bool)
        for row, col in self.included:
            mask[row, col] = True
        return mask

    def no_analysis_mask(self) -> np.ndarray:
        mask = np.zeros((self.rows, self.cols), dtype=bool)
        for row, col in self.no_analysis:
            mask[row, col] = True
        return mask


class PatchSample(BaseModel):
    """Pre/post crops of one patch"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    patch_id: PatchId
    pre_pixels: np.ndarray = Field(..., description="uint8 (64, 64, 3)")
    post_pixels: np.ndarray = Field(..., description="uint8 (64, 64, 3)")
    post_date: date



class RasterEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    capture_date: date
    png_path: str
    sidecar_path: str


class RasterCatalog(BaseModel):
    """On-disk rasters of one city sorted by capture date; the first entry is the pre image.

    Rasters are loaded on demand so a full city stack never has to sit in memory.
    """
    model_config = ConfigDict(frozen=True)

    city_id: str
    entries: List[RasterEntry] = Field(..., min_length=1)

    @model_validator(mode="after")
    def validate_order(self):
        dates = [entry.capture_date for entry in self.entries]
        if dates != sorted(dates) or len(set(dates)) != len(dates):
            raise ValueError("raster entries must have distinct, ascending capture dates")
        return self

    @property
    def image_dates(self) -> List[date]:
        return [entry.capture_date for entry in self.entries]

    @property
    def post_dates(self) -> List[date]:
        return self.image_dates[1:]

    def load(self, when: date) -> GeoRaster:
        from src.storage.formats import load_raster

        for entry in self.entries:
            if entry.capture_date == when:
                return load_raster(entry.png_path, entry.sidecar_path)
        raise KeyError(when)

    def load_pre(self) -> GeoRaster:
        return self.load(self.entries[0].capture_date)
