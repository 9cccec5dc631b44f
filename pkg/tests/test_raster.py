import numpy as np
import pytest

from conftest import ORIGIN, full_cover, make_raster, pixel_ring
from src.exceptions import ConfigurationError, DimensionError, PatchLookupError
from src.schemas.raster import AOIKind, AreaOfInterest
from src.services.raster_service import raster_service


def test_full_cover_grid_128():
    grid = raster_service.build_grid(make_raster(128, 128), [full_cover(128, 128)])
    assert (grid.rows, grid.cols) == (2, 2)
    assert grid.included == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert not grid.no_analysis


def test_left_half_aoi_keeps_left_column():
    aoi = AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[pixel_ring(0, 0, 64, 128)])
    grid = raster_service.build_grid(make_raster(128, 128), [aoi])
    assert grid.included == {(0, 0), (1, 0)}


def test_partial_windows_dropped():
    grid = raster_service.build_grid(make_raster(200, 130), [full_cover(200, 130)])
    assert (grid.rows, grid.cols) == (2, 3)
    assert len(grid.included) <= (130 // 64) * (200 // 64)


def test_large_full_cover_count():
    raster = make_raster(6400, 6400)
    grid = raster_service.build_grid(raster, [full_cover(6400, 6400)])
    assert len(grid.included) == 10000


def test_no_analysis_zone_subset():
    zone = AreaOfInterest(kind=AOIKind.NO_ANALYSIS_ZONE, rings=[pixel_ring(0, 0, 64, 64)])
    grid = raster_service.build_grid(make_raster(128, 128), [full_cover(128, 128), zone])
    assert grid.no_analysis == {(0, 0)}
    assert grid.analysis_ids() == [(0, 1), (1, 0), (1, 1)]


def test_grid_errors():
    with pytest.raises(DimensionError):
        raster_service.build_grid(make_raster(63, 128), [full_cover(63, 128)])
    with pytest.raises(ConfigurationError):
        raster_service.build_grid(make_raster(128, 128), [])
    zone = AreaOfInterest(kind=AOIKind.NO_ANALYSIS_ZONE, rings=[pixel_ring(0, 0, 64, 64)])
    with pytest.raises(ConfigurationError):
        raster_service.build_grid(make_raster(128, 128), [zone])


def test_aoi_ring_validation():
    with pytest.raises(ValueError):
        AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[[(0, 0), (1, 0), (0, 0)]])
    with pytest.raises(ValueError):
        AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[[(0, 0), (1, 0), (1, 1), (0, 1)]])
    bowtie = [(0, 0), (1, 1), (1, 0), (0, 1), (0, 0)]
    with pytest.raises(ValueError):
        AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[bowtie])


def test_aoi_monotonicity():
    raster = make_raster(512, 512)
    small = AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[pixel_ring(100, 100, 300, 300)])
    large = AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[pixel_ring(50, 80, 420, 330)])
    assert raster_service.build_grid(raster, [small]).included <= raster_service.build_grid(raster, [large]).included


def test_point_to_patch():
    raster = make_raster(640, 512)
    grid = raster_service.build_grid(raster, [full_cover(640, 512)])
    assert raster_service.point_to_patch(grid, raster, (ORIGIN.origin_lon, ORIGIN.origin_lat)) == (0, 0)
    left = (ORIGIN.origin_lon - ORIGIN.pixel_deg, ORIGIN.origin_lat)
    assert raster_service.point_to_patch(grid, raster, left) is None
    center = raster_service.window_center_lonlat(grid, raster, (3, 7))
    assert raster_service.point_to_patch(grid, raster, center) == (3, 7)
    assert raster_service.point_to_patch(grid, raster, (float("nan"), 36.0)) is None


def test_point_to_patch_round_trip():
    raster = make_raster(448, 320)
    aoi = AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[pixel_ring(10, 10, 400, 300)])
    grid = raster_service.build_grid(raster, [aoi])
    for patch_id in grid.sorted_ids():
        lonlat = raster_service.window_center_lonlat(grid, raster, patch_id)
        assert raster_service.point_to_patch(grid, raster, lonlat) == patch_id


def test_extract_sample_untouched():
    pre, post = make_raster(128, 128, 0), make_raster(128, 128, 255)
    grid = raster_service.build_grid(pre, [full_cover(128, 128)])
    sample = raster_service.extract_sample(pre, post, grid, (1, 1))
    assert sample.pre_pixels.shape == (64, 64, 3)
    assert np.all(sample.pre_pixels == 0)
    assert np.all(sample.post_pixels == 255)


def test_extract_last_window_and_lookup_error():
    pixels = np.arange(130 * 200 * 3, dtype=np.int64).reshape(130, 200, 3) % 251
    raster = make_raster(200, 130, pixels)
    grid = raster_service.build_grid(raster, [full_cover(200, 130)])
    sample = raster_service.extract_sample(raster, raster, grid, (grid.rows - 1, grid.cols - 1))
    np.testing.assert_array_equal(sample.pre_pixels, pixels[64:128, 128:192])
    with pytest.raises(PatchLookupError):
        raster_service.extract_sample(raster, raster, grid, (5, 5))


def test_extract_batch_channel_order():
    pre, post = make_raster(128, 128, 51), make_raster(128, 128, 204)
    grid = raster_service.build_grid(pre, [full_cover(128, 128)])
    batch = raster_service.extract_batch(pre, post, grid, [(0, 0), (1, 1)])
    assert batch.shape == (2, 6, 64, 64)
    np.testing.assert_allclose(batch[:, :3], 0.2)
    np.testing.assert_allclose(batch[:, 3:], 0.8)
    raw = raster_service.extract_batch(pre, post, grid, [(0, 1)], raw=True)
    assert raw.dtype == np.uint8 and raw[0, 0, 0, 0] == 51


def test_coregistration_checked():
    pre = make_raster(128, 128)
    moved = make_raster(128, 128, geo=ORIGIN.model_copy(update={"origin_lon": 37.5}))
    grid = raster_service.build_grid(pre, [full_cover(128, 128)])
    with pytest.raises(DimensionError):
        raster_service.extract_sample(pre, moved, grid, (0, 0))
