from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import Polygon

from src.exceptions import ConfigurationError, DimensionError, PatchLookupError
from src.logging.logger import get_logger
from src.schemas.raster import AOIKind, AreaOfInterest, GeoRaster, PatchGrid, PatchId, PatchSample

logger = get_logger(__name__)


class RasterService:
    """Patch tiling, georeferencing lookups and pre/post crop extraction"""

    def __init__(self, patch_size: int = 64):
        self.patch_size = patch_size

    def build_grid(
        self,
        raster: GeoRaster,
        aois: Sequence[AreaOfInterest],
        patch_size: Optional[int] = None
    ) -> PatchGrid:
        """
        Tile the raster into non-overlapping square windows and keep those whose
        center lies inside a populated-area ring.

        Partial windows at the right and bottom edges are dropped, never padded.
        """
        size = patch_size or self.patch_size
        if raster.width < size or raster.height < size:
            raise DimensionError(
                f"Raster {raster.width}x{raster.height} is smaller than one {size}x{size} patch"
            )
        if not aois:
            raise ConfigurationError("At least one area of interest is required to build a grid")

        populated = [aoi for aoi in aois if aoi.kind == AOIKind.POPULATED_AREA]
        zones = [aoi for aoi in aois if aoi.kind == AOIKind.NO_ANALYSIS_ZONE]
        if not populated:
            raise ConfigurationError("No PopulatedArea AOI supplied")

        rows, cols = raster.height // size, raster.width // size
        lon, lat = self._window_centers(raster, rows, cols, size)

        inside = self._inside_any(populated, lon, lat)
        in_zone = self._inside_any(zones, lon, lat) & inside

        included = frozenset((int(r), int(c)) for r, c in zip(*np.nonzero(inside)))
        no_analysis = frozenset((int(r), int(c)) for r, c in zip(*np.nonzero(in_zone)))

        logger.info(
            f"Grid for {raster.city_id}: {rows}x{cols} windows, "
            f"{len(included)} included, {len(no_analysis)} in no-analysis zones"
        )
        return PatchGrid(
            city_id=raster.city_id,
            patch_size=size,
            rows=rows,
            cols=cols,
            included=included,
            no_analysis=no_analysis
        )

    def point_to_patch(
        self,
        grid: PatchGrid,
        raster: GeoRaster,
        lonlat: Tuple[float, float]
    ) -> Optional[PatchId]:
        """Patch whose pixel window contains the coordinate, or None outside the raster or grid"""
        lon, lat = lonlat
        col_f, row_f = raster.geo.to_pixel(lon, lat)
        if not (np.isfinite(col_f) and np.isfinite(row_f)):
            return None
        if col_f < 0 or row_f < 0 or col_f >= raster.width or row_f >= raster.height:
            return None
        patch_id = (int(row_f // grid.patch_size), int(col_f // grid.patch_size))
        return patch_id if patch_id in grid.included else None

    def points_to_patches(
        self,
        grid: PatchGrid,
        raster: GeoRaster,
        lonlats: Iterable[Tuple[float, float]]
    ) -> List[Optional[PatchId]]:
        return [self.point_to_patch(grid, raster, lonlat) for lonlat in lonlats]

    def window_center_lonlat(self, grid: PatchGrid, raster: GeoRaster, patch_id: PatchId) -> Tuple[float, float]:
        row, col = patch_id
        half = grid.patch_size / 2.0
        return raster.transform * (col * grid.patch_size + half, row * grid.patch_size + half)

    def extract_sample(
        self,
        pre: GeoRaster,
        post: GeoRaster,
        grid: PatchGrid,
        patch_id: PatchId
    ) -> PatchSample:
        """Raw pre/post crops of one included patch (no normalization)"""
        if patch_id not in grid.included:
            raise PatchLookupError(f"Patch {patch_id} is not included in the grid of {grid.city_id}")
        self.check_coregistered([pre, post])
        rows, cols = grid.window(patch_id)
        return PatchSample(
            patch_id=patch_id,
            pre_pixels=np.array(pre.pixels[rows, cols]),
            post_pixels=np.array(post.pixels[rows, cols]),
            post_date=post.capture_date
        )

    def extract_batch(
        self,
        pre: GeoRaster,
        post: GeoRaster,
        grid: PatchGrid,
        patch_ids: Sequence[PatchId],
        raw: bool = False
    ) -> np.ndarray:
        """
        Network input (N, 6, size, size): pre RGB channels, then post RGB channels.

        Scaled to [0, 1] as float64, or the untouched uint8 values when `raw` is set.
        """
        self.check_coregistered([pre, post])
        size = grid.patch_size
        batch = np.empty((len(patch_ids), 6, size, size), dtype=np.uint8 if raw else np.float64)
        for index, patch_id in enumerate(patch_ids):
            if patch_id not in grid.included:
                raise PatchLookupError(f"Patch {patch_id} is not included in the grid of {grid.city_id}")
            rows, cols = grid.window(patch_id)
            batch[index, :3] = pre.pixels[rows, cols].transpose(2, 0, 1)
            batch[index, 3:] = post.pixels[rows, cols].transpose(2, 0, 1)
        if not raw:
            batch /= 255.0
        return batch

    def check_coregistered(self, rasters: Sequence[GeoRaster]) -> None:
        reference = rasters[0]
        for raster in rasters[1:]:
            if (raster.width, raster.height) != (reference.width, reference.height):
                raise DimensionError(
                    f"Raster {raster.capture_date} is {raster.width}x{raster.height}, "
                    f"expected {reference.width}x{reference.height}"
                )
            if raster.geo != reference.geo:
                raise DimensionError(f"Raster {raster.capture_date} is not co-registered with {reference.capture_date}")
            if raster.city_id != reference.city_id:
                raise DimensionError(f"Raster {raster.capture_date} belongs to {raster.city_id}, not {reference.city_id}")

    def _window_centers(self, raster: GeoRaster, rows: int, cols: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
        half = size / 2.0
        x = np.arange(cols) * size + half
        y = np.arange(rows) * size + half
        xx, yy = np.meshgrid(x, y)
        a = raster.transform
        return a.a * xx + a.b * yy + a.c, a.d * xx + a.e * yy + a.f

    def _inside_any(self, aois: Sequence[AreaOfInterest], lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
        inside = np.zeros(lon.shape, dtype=bool)
        for aoi in aois:
            for ring in aoi.rings:
                inside |= shapely.contains_xy(Polygon(ring), lon, lat)
        return inside


raster_service = RasterService()
