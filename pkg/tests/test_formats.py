import json

import numpy as np
import pandas as pd
import pytest

from conftest import dates, full_grid, make_raster, score_panel
from src.exceptions import ConfigurationError, DimensionError, InputError, ShapeError
from src.neuralnet.network import ConvNet
from src.schemas.labels import Annotation, DamageClass
from src.schemas.network import NetworkSpec
from src.storage import formats


def test_csv_is_byte_stable(tmp_path):
    frame = pd.DataFrame({"a": [0.1, 1 / 3, 2.5e-12], "b": ["x", "y", "z"]})
    first = formats.write_csv(frame, tmp_path / "one.csv").read_bytes()
    second = formats.write_csv(frame.copy(), tmp_path / "two.csv").read_bytes()
    assert first == second
    assert b"\r\n" not in first
    assert b"0.3333333333" in first


def test_json_is_sorted_and_rejects_nan(tmp_path):
    path = formats.write_json({"b": 1, "a": [1, 2]}, tmp_path / "x.json")
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
    with pytest.raises(ValueError):
        formats.write_json({"a": float("nan")}, tmp_path / "bad.json")


def test_read_errors_name_the_file(tmp_path):
    with pytest.raises(InputError, match="missing.csv"):
        formats.read_csv(tmp_path / "missing.csv", ["a"])
    formats.write_csv(pd.DataFrame({"a": [1]}), tmp_path / "one.csv")
    with pytest.raises(InputError, match="lacks columns"):
        formats.read_csv(tmp_path / "one.csv", ["a", "b"])
    formats.write_csv(pd.DataFrame({"a": []}), tmp_path / "empty.csv")
    with pytest.raises(InputError, match="no rows"):
        formats.read_csv(tmp_path / "empty.csv", ["a"], allow_empty=False)
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(InputError):
        formats.read_json(tmp_path / "broken.json")


def test_raster_sidecar_and_catalog(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, (64, 128, 3))
    for when in dates(2):
        formats.save_raster(make_raster(128, 64, pixels, when=when), tmp_path / f"c_{when}.png")
    catalog = formats.discover_rasters(tmp_path)
    assert catalog.city_id == "test" and catalog.image_dates == dates(2)
    loaded = catalog.load_pre()
    np.testing.assert_array_equal(loaded.pixels, pixels)

    formats.save_raster(make_raster(128, 64, city_id="other", when=dates(3)[2]), tmp_path / "o.png")
    with pytest.raises(DimensionError):
        formats.discover_rasters(tmp_path)
    with pytest.raises(InputError):
        formats.discover_rasters(tmp_path / "nowhere")


def test_grid_csv_keeps_zone(tmp_path):
    grid = full_grid(3, 4, no_analysis={(1, 2)})
    grid = grid.model_copy(update={"included": grid.included - {(0, 0)}})
    loaded = formats.load_grid_csv(formats.export_grid_csv(grid, tmp_path / "grid.csv"))
    assert loaded == grid
    assert len(pd.read_csv(tmp_path / "grid.csv")) == 12


def test_annotation_directory_declares_dates(tmp_path):
    first, second = dates(3)[1:]
    point = Annotation(lonlat=(37.0, 36.0), date=second, damage_class=DamageClass.SEVERE)
    formats.save_annotations([], tmp_path / formats.annotation_file_name(first))
    formats.save_annotations([point], tmp_path / formats.annotation_file_name(second))
    annotations, declared = formats.load_annotation_source(tmp_path)
    assert annotations == [point]
    assert declared == [first, second]

    single, none = formats.load_annotation_source(tmp_path / formats.annotation_file_name(second))
    assert single == [point] and none is None
    (tmp_path / "sub").mkdir()
    with pytest.raises(InputError):
        formats.load_annotation_source(tmp_path / "sub")


def test_invalid_inputs_are_rejected(tmp_path):
    (tmp_path / "aoi.json").write_text(json.dumps({"kind": "PopulatedArea", "rings": [[[0, 0], [1, 0], [0, 0]]]}))
    with pytest.raises(ConfigurationError):
        formats.load_aoi(tmp_path / "aoi.json")
    formats.save_events([], tmp_path / "events.csv")
    with pytest.raises(InputError):
        formats.load_events(tmp_path / "events.csv")
    pd.DataFrame({"lon": [1.0], "lat": [2.0], "date": ["2014-01-01"], "damage_class": ["Flattened"]}).to_csv(
        tmp_path / "ann.csv", index=False)
    with pytest.raises(InputError):
        formats.load_annotations(tmp_path / "ann.csv")


def test_unsmoothed_score_panel_leaves_stage_two_empty(tmp_path):
    grid = full_grid(2, 2)
    panel = score_panel(np.full((2, 2, 2), 0.25))
    path = formats.save_score_panel(panel, tmp_path / "scores.csv")
    frame = pd.read_csv(path)
    assert frame["stage2"].isna().all() and frame["binary"].isna().all()
    loaded = formats.load_score_panel(path, grid)
    assert not loaded.is_smoothed
    np.testing.assert_array_equal(loaded.stage1, panel.stage1)

    smoothed = panel.with_smoothing(np.full((2, 2, 2), 0.75), np.ones((2, 2, 2), dtype=np.int8))
    reloaded = formats.load_score_panel(formats.save_score_panel(smoothed, tmp_path / "s2.csv"), grid)
    assert reloaded.is_smoothed and reloaded.binary.sum() == 8
    assert set(pd.read_csv(tmp_path / "s2.csv")["binary"]) == {1}


def test_model_file_checks(tmp_path):
    spec = NetworkSpec(num_conv_blocks=1, conv_filters=2, fc_units=4, patch_size=8)
    params = ConvNet(spec).init_params(1.0, np.random.default_rng(0))
    path = formats.save_model(spec, params, tmp_path / "model.json")
    loaded_spec, loaded = formats.load_model(path)
    assert loaded_spec == spec
    x = np.random.default_rng(1).random((3, 6, 8, 8))
    np.testing.assert_array_equal(ConvNet(spec).forward(loaded, x)[0], ConvNet(spec).forward(params, x)[0])

    payload = json.loads(path.read_text())
    payload["spec"]["fc_units"] = 5
    (tmp_path / "tampered.json").write_text(json.dumps(payload))
    with pytest.raises(ShapeError):
        formats.load_model(tmp_path / "tampered.json")
    payload["format"] = "something-else"
    (tmp_path / "foreign.json").write_text(json.dumps(payload))
    with pytest.raises(ConfigurationError):
        formats.load_model(tmp_path / "foreign.json")
