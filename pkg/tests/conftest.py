from datetime import date, timedelta
from typing import List, Sequence

import numpy as np
import pytest

from configs import get_runtime_settings
from src.schemas.raster import AOIKind, AreaOfInterest, GeoRaster, GeoReference, PatchGrid
from src.schemas.scores import ScorePanel

ORIGIN = GeoReference(origin_lon=37.0, origin_lat=36.0, pixel_deg=1e-4)
START = date(2014, 1, 1)


@pytest.fixture(autouse=True)
def quiet_runtime():
    """No progress bars and a single worker unless a test asks otherwise"""
    runtime = get_runtime_settings()
    saved = (runtime.progress, runtime.jobs)
    runtime.progress, runtime.jobs = False, 1
    yield runtime
    runtime.progress, runtime.jobs = saved


def make_raster(width: int, height: int, value=0, when: date = START, city_id: str = "test",
                geo: GeoReference = ORIGIN) -> GeoRaster:
    if isinstance(value, np.ndarray):
        pixels = value.astype(np.uint8)
    else:
        pixels = np.full((height, width, 3), value, dtype=np.uint8)
    return GeoRaster(width=width, height=height, pixels=pixels, geo=geo, capture_date=when, city_id=city_id)


def pixel_ring(col0: float, row0: float, col1: float, row1: float, geo: GeoReference = ORIGIN) -> List:
    """Closed lon/lat ring around a pixel rectangle"""
    corners = [(col0, row0), (col1, row0), (col1, row1), (col0, row1), (col0, row0)]
    return [tuple(geo.transform * corner) for corner in corners]


def full_cover(width: int, height: int, margin: float = 0.5) -> AreaOfInterest:
    return AreaOfInterest(kind=AOIKind.POPULATED_AREA,
                          rings=[pixel_ring(-margin, -margin, width + margin, height + margin)])


def dates(count: int, start: date = START, step: int = 30) -> List[date]:
    return [start + timedelta(days=step * i) for i in range(count)]


def full_grid(rows: int, cols: int, city_id: str = "test", patch_size: int = 64, no_analysis=()) -> PatchGrid:
    return PatchGrid(
        city_id=city_id,
        patch_size=patch_size,
        rows=rows,
        cols=cols,
        included=frozenset((r, c) for r in range(rows) for c in range(cols)),
        no_analysis=frozenset(no_analysis)
    )


def score_panel(stage1: np.ndarray, mask: np.ndarray = None, when: Sequence[date] = None,
                city_id: str = "test") -> ScorePanel:
    stage1 = np.asarray(stage1, dtype=np.float64)
    mask = np.ones(stage1.shape[1:], dtype=bool) if mask is None else mask
    return ScorePanel(
        city_id=city_id,
        dates=list(when) if when is not None else dates(stage1.shape[0]),
        mask=mask,
        stage1=np.where(mask[None], stage1, np.nan)
    )


@pytest.fixture
def small_raster() -> GeoRaster:
    return make_raster(128, 128)


@pytest.fixture
def grid_4x4() -> PatchGrid:
    return full_grid(4, 4)
