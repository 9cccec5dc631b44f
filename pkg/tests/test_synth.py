import numpy as np
import pytest

from src.exceptions import ConfigurationError
from src.schemas.labels import LabelClass
from src.schemas.synth import RenderSpec
from src.services.label_service import label_service
from src.services.raster_service import raster_service
from src.services.synth_service import synth_service

QUIET = RenderSpec(illumination_shift=0.0, noise_sigma=0.0)


@pytest.fixture(scope="module")
def city():
    return synth_service.generate_city(384, 0.8, 0.2, seed=11, no_analysis_zone=True)


def test_zero_share_destroys_nothing():
    city = synth_service.generate_city(256, 0.7, 0.0, seed=1)
    assert city.destruction_schedule == {}
    assert synth_service.emit_annotations(city, RenderSpec()) == []


def test_generation_is_seed_deterministic(city):
    again = synth_service.generate_city(384, 0.8, 0.2, seed=11, no_analysis_zone=True)
    assert again == city
    other = synth_service.generate_city(384, 0.8, 0.2, seed=12, no_analysis_zone=True)
    assert other.destruction_schedule != city.destruction_schedule


def test_schedule_respects_share_and_dates(city):
    assert len(city.destruction_schedule) == round(0.2 * len(city.buildings))
    assert all(1 <= index < city.date_count for index in city.destruction_schedule.values())
    unclustered = synth_service.generate_city(384, 0.8, 0.2, seed=11, clustered=False)
    assert len(unclustered.destruction_schedule) == len(city.destruction_schedule)


def test_footprints_never_overlap(city):
    footprints = [b.footprint for b in city.buildings]
    for i, a in enumerate(footprints):
        assert not any(a.overlaps(b) for b in footprints[i + 1:])


def test_generation_errors():
    with pytest.raises(ConfigurationError):
        synth_service.generate_city(256, 0.5, 1.5, seed=0)
    with pytest.raises(ConfigurationError):
        synth_service.generate_city(256, 0.0, 0.1, seed=0)
    with pytest.raises(ConfigurationError):
        synth_service.generate_city(16, 0.5, 0.1, seed=0)


def test_render_is_deterministic(city):
    spec = RenderSpec()
    first, second = synth_service.render(city, spec, 3), synth_service.render(city, spec, 3)
    np.testing.assert_array_equal(first.pixels, second.pixels)
    assert first.capture_date == city.date_of(3)
    assert first.pixels.shape == (384, 384, 3)
    with pytest.raises(ConfigurationError):
        synth_service.render(city, spec, spec.date_count)


def test_destruction_changes_only_the_footprint(city):
    building_id, index = next(iter(city.destruction_schedule.items()))
    before = synth_service.render(city, QUIET, index - 1).pixels.astype(int)
    after = synth_service.render(city, QUIET, index).pixels.astype(int)
    f = city.building(building_id).footprint
    assert np.abs(after[f.row0:f.row1, f.col0:f.col1] - before[f.row0:f.row1, f.col0:f.col1]).mean() > 20

    changed = np.zeros((city.extent, city.extent), dtype=bool)
    for other, when in city.destruction_schedule.items():
        if when == index:
            g = city.building(other).footprint
            changed[g.row0:g.row1, g.col0:g.col1] = True
    assert not np.any((after != before).any(axis=2) & ~changed)


def test_annotations_accumulate(city):
    spec = RenderSpec()
    annotations = synth_service.emit_annotations(city, spec)
    by_date = label_service.group_by_date(annotations)
    assert set(by_date) <= set(synth_service.annotation_dates(city, spec))
    points = [{a.lonlat for a in group} for group in by_date.values()]
    for earlier, later in zip(points, points[1:]):
        assert earlier <= later
    zone = city.no_analysis_zone
    assert zone is not None
    inside = [b for b in city.destruction_schedule if zone.contains(*city.building(b).centroid)]
    assert set(synth_service.annotated_buildings(city)) == set(city.destruction_schedule) - set(inside)


def test_ground_truth_is_monotone(city):
    pre = synth_service.render(city, QUIET, 0)
    grid = raster_service.build_grid(pre, synth_service.city_aois(city))
    truth = synth_service.ground_truth_panel(city, grid)
    assert truth.image_dates == city.image_dates()[1:]
    destroyed = truth.codes == LabelClass.DESTROYED
    assert np.all(destroyed[1:] >= destroyed[:-1])
    assert truth.destroyed_count() > 0


def test_propagated_labels_agree_with_truth(city):
    spec = RenderSpec()
    pre = synth_service.render(city, QUIET, 0)
    grid = raster_service.build_grid(pre, synth_service.city_aois(city))
    assert grid.no_analysis
    post_dates = city.image_dates()[1:]
    panel = label_service.build_label_panel(
        grid, pre, synth_service.emit_annotations(city, spec), post_dates,
        synth_service.annotation_dates(city, spec)
    )
    truth = synth_service.ground_truth_panel(city, grid)
    known = (panel.codes != LabelClass.UNKNOWN) & panel.mask[None]
    assert known.any()
    np.testing.assert_array_equal(panel.codes[known], truth.codes[known])
    zone = grid.no_analysis_mask()
    assert np.all(panel.codes[:, zone] == LabelClass.UNKNOWN)


def test_events_hit_destroyed_buildings(city):
    events = synth_service.emit_events(city, share=0.5, decoys=4, seed=2)
    assert len(events) == round(0.5 * len(city.destruction_schedule)) + 4
    assert events == synth_service.emit_events(city, share=0.5, decoys=4, seed=2)
    for event in events[:-4]:
        assert city.start_date < event.date <= city.date_of(city.date_count - 1)
