import math

import numpy as np
import pytest

from conftest import dates, full_grid, score_panel
from src.exceptions import ClassError, PatchLookupError, ShapeError
from src.forest.decision_tree import fit_tree, predict_tree
from src.schemas.evaluation import ScoredLabelSet, Stage
from src.schemas.forest import CalibrationSource, ForestParams
from src.schemas.labels import LabelPanel, SplitAssignment, SplitName
from src.schemas.raster import PatchGrid
from src.services.evaluation_service import evaluation_service
from src.services.label_service import label_service
from src.services.smoother_service import GROUP_NAMES, feature_names, smoother_service

SMALL_FOREST = ForestParams(num_trees=15, max_depth=4, min_leaf=2, features_per_split=3)


def test_feature_widths():
    assert len(feature_names()) == 17
    assert len(feature_names(include_leads=True)) == 29
    panel = score_panel(np.random.default_rng(0).random((4, 3, 3)))
    grid = full_grid(3, 3)
    assert smoother_service.build_feature_matrix(panel, grid, 2).shape == (9, 17)
    assert smoother_service.build_feature_matrix(panel, grid, 2, include_leads=True).shape == (9, 29)


def test_uniform_scores():
    panel = score_panel(np.full((1, 5, 5), 0.4))
    features = smoother_service.build_features(panel, full_grid(5, 5), (2, 2), panel.dates[0])
    np.testing.assert_allclose(features, [0.4, 0.4, 0.0, 0.4, 0.0] * 3 + [1.0, 1.0], atol=1e-12)


def test_single_hot_patch_spreads_to_ring_one():
    layer = np.zeros((1, 5, 5))
    layer[0, 2, 2] = 1.0
    panel = score_panel(layer)
    matrix = smoother_service.build_feature_matrix(panel, full_grid(5, 5), 0, patch_ids=[(1, 1), (0, 0)])
    assert matrix[0, GROUP_NAMES.index("own")] == 0.0
    assert matrix[0, GROUP_NAMES.index("ring1_mean")] == pytest.approx(1 / 8)
    assert matrix[0, GROUP_NAMES.index("ring1_std")] == pytest.approx(math.sqrt(7) / 8)
    # (0, 0) sees the hot patch in its second ring only
    assert matrix[1, GROUP_NAMES.index("ring1_mean")] == 0.0
    assert matrix[1, GROUP_NAMES.index("ring2_mean")] == pytest.approx(1 / 5)


def test_corner_ring_populations():
    layer = np.arange(25, dtype=float).reshape(1, 5, 5) / 25
    panel = score_panel(layer)
    features = smoother_service.build_features(panel, full_grid(5, 5), (0, 0), panel.dates[0])
    ring1 = layer[0, [0, 1, 1], [1, 0, 1]]
    ring2 = layer[0, [0, 1, 2, 2, 2], [2, 2, 0, 1, 2]]
    assert features[1] == pytest.approx(ring1.mean())
    assert features[2] == pytest.approx(ring1.std())
    assert features[3] == pytest.approx(ring2.mean())
    assert features[4] == pytest.approx(ring2.std())


def test_matrix_matches_patch_by_patch_features():
    rng = np.random.default_rng(4)
    included = frozenset((r, c) for r in range(6) for c in range(7) if rng.random() > 0.25)
    grid = PatchGrid(city_id="test", patch_size=64, rows=6, cols=7, included=included, no_analysis=frozenset())
    panel = score_panel(rng.random((5, 6, 7)), mask=grid.included_mask())
    for include_leads in (False, True):
        for t in range(5):
            matrix = smoother_service.build_feature_matrix(panel, grid, t, include_leads)
            expected = np.array([
                smoother_service.build_features(panel, grid, pid, panel.dates[t], include_leads)
                for pid in grid.sorted_ids()
            ])
            np.testing.assert_allclose(matrix, expected, rtol=0, atol=1e-12)


def test_missing_lag_flags():
    panel = score_panel(np.random.default_rng(0).random((3, 3, 3)))
    grid = full_grid(3, 3)
    names = feature_names(include_leads=True)
    first = smoother_service.build_feature_matrix(panel, grid, 0, include_leads=True)
    last = smoother_service.build_feature_matrix(panel, grid, 2, include_leads=True)
    flags = [names.index(n) for n in ("missing_t-1", "missing_t-2", "missing_t+1", "missing_t+2")]
    np.testing.assert_array_equal(first[0, flags], [1, 1, 0, 0])
    np.testing.assert_array_equal(last[0, flags], [0, 0, 1, 1])
    # a missing lag repeats the current date's group
    np.testing.assert_array_equal(first[:, 5:10], first[:, 0:5])


def test_feature_lookup_errors():
    grid = PatchGrid(city_id="test", patch_size=64, rows=2, cols=2,
                     included=frozenset({(0, 0), (0, 1)}), no_analysis=frozenset())
    panel = score_panel(np.zeros((2, 2, 2)), mask=grid.included_mask())
    with pytest.raises(PatchLookupError):
        smoother_service.build_features(panel, grid, (1, 1), panel.dates[0])
    with pytest.raises(PatchLookupError):
        smoother_service.build_feature_matrix(panel, grid, 5)


def test_training_rows_use_train_split_labels():
    grid = full_grid(2, 2)
    when = dates(2)
    panel = score_panel(np.random.default_rng(0).random((2, 2, 2)), when=when)
    codes = np.array([[[0, 1], [-1, 0]], [[1, 1], [0, -1]]], dtype=np.int8)
    labels = LabelPanel(city_id="test", image_dates=when, annotation_dates=when, codes=codes,
                        mask=np.ones((2, 2), dtype=bool))
    split = SplitAssignment(assignment={(0, 0): SplitName.TRAIN, (0, 1): SplitName.TEST,
                                        (1, 0): SplitName.TRAIN, (1, 1): SplitName.TRAIN}, seed=0)
    rows = smoother_service.training_rows(panel, grid, labels, split)
    assert [(k.row, k.col, k.date_index) for k in rows.keys] == [(0, 0, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1)]
    np.testing.assert_array_equal(rows.y, [0, 0, 1, 0])
    assert rows.x.shape == (4, 17)


def test_forest_is_deterministic(quiet_runtime):
    rng = np.random.default_rng(1)
    x = rng.random((200, 6))
    y = (x[:, 0] + 0.3 * rng.random(200) > 0.6).astype(float)
    first = smoother_service.train_forest(x, y, SMALL_FOREST, seed=3)
    quiet_runtime.jobs = 4
    second = smoother_service.train_forest(x, y, SMALL_FOREST, seed=3)
    np.testing.assert_array_equal(first.oob_scores, second.oob_scores)
    for a, b in zip(first.model.trees, second.model.trees):
        np.testing.assert_array_equal(a.threshold, b.threshold)
        np.testing.assert_array_equal(a.feature, b.feature)
    other = smoother_service.train_forest(x, y, SMALL_FOREST, seed=4)
    assert not np.array_equal(first.oob_scores, other.oob_scores, equal_nan=True)


def test_single_feature_stump():
    x = np.linspace(0, 1, 20)[:, None]
    y = (x[:, 0] > 0.5).astype(float)
    tree = fit_tree(x, y, max_depth=1, min_leaf=1, features_per_split=1, rng=np.random.default_rng(0))
    assert tree.depth() == 1
    assert x[9, 0] <= tree.threshold[0] < x[10, 0]
    np.testing.assert_array_equal(predict_tree(tree, x), y)


def test_depth_zero_predicts_base_rate():
    x = np.random.default_rng(0).random((10, 2))
    y = np.array([1.0, 0, 0, 1, 0, 0, 0, 0, 1, 0])
    tree = fit_tree(x, y, max_depth=0, min_leaf=1, features_per_split=2, rng=np.random.default_rng(0))
    np.testing.assert_allclose(predict_tree(tree, x), 0.3)


def test_random_labels_have_chance_oob_auc():
    rng = np.random.default_rng(7)
    x = rng.random((400, 5))
    y = (rng.random(400) < 0.5).astype(float)
    params = ForestParams(num_trees=30, max_depth=4, min_leaf=5, features_per_split=2,
                          calibrate_on=CalibrationSource.OOB)
    fit = smoother_service.train_forest(x, y, params)
    scored = ScoredLabelSet.from_arrays(smoother_service.calibration_scores(fit, x), y)
    assert 0.4 < evaluation_service.roc_auc(scored) < 0.6


def test_predict_averages_trees():
    rng = np.random.default_rng(2)
    x = rng.random((80, 4))
    y = (x[:, 1] > 0.4).astype(float)
    model = smoother_service.train_forest(x, y, SMALL_FOREST).model
    expected = np.mean([predict_tree(tree, x) for tree in model.trees], axis=0)
    np.testing.assert_allclose(smoother_service.predict_forest(model, x), expected)
    with pytest.raises(ShapeError):
        smoother_service.predict_forest(model, x[:, :3])


def test_forest_needs_both_classes():
    with pytest.raises(ClassError):
        smoother_service.train_forest(np.zeros((5, 2)), np.zeros(5), SMALL_FOREST)


def test_calibrate_cutoff_examples():
    cut = smoother_service.calibrate_cutoff([0.9, 0.7, 0.3, 0.1], [1, 1, 1, 1], 0.5)
    assert (cut.threshold, cut.achieved_train_recall) == (0.7, 0.5)
    cut = smoother_service.calibrate_cutoff([1.0, 1.0, 1.0], [1, 1, 1], 0.5)
    assert (cut.threshold, cut.achieved_train_recall) == (1.0, 1.0)
    # negatives never move the cutoff
    cut = smoother_service.calibrate_cutoff([0.9, 0.95, 0.7, 0.3, 0.1], [1, 0, 1, 1, 1], 0.5)
    assert cut.threshold == 0.7


def test_calibrate_cutoff_odd_count():
    scores = np.random.default_rng(0).random(1001)
    cut = smoother_service.calibrate_cutoff(scores, np.ones(1001), 0.5)
    assert cut.threshold == np.sort(scores)[::-1][500]
    assert cut.achieved_train_recall == pytest.approx(501 / 1001)
    assert cut.n_positives == 1001
    with pytest.raises(ClassError):
        smoother_service.calibrate_cutoff(scores, np.zeros(1001), 0.5)


def test_smooth_panel_binarizes_at_threshold():
    rng = np.random.default_rng(3)
    grid = PatchGrid(city_id="test", patch_size=64, rows=4, cols=4,
                     included=frozenset((r, c) for r in range(4) for c in range(4) if (r, c) != (3, 3)),
                     no_analysis=frozenset({(0, 0)}))
    panel = score_panel(rng.random((3, 4, 4)), mask=grid.included_mask())
    x = rng.random((100, 17))
    y = (x[:, 0] > 0.5).astype(float)
    fit = smoother_service.train_forest(x, y, SMALL_FOREST)
    calibration = smoother_service.calibrate_cutoff(smoother_service.calibration_scores(fit, x), y)

    smoothed = smoother_service.smooth_panel(panel, grid, fit.model, calibration)
    assert smoothed.is_smoothed
    assert np.isnan(smoothed.stage2[:, 3, 3]).all()
    assert not np.isnan(smoothed.stage2[:, 0, 0]).any()
    inside = grid.included_mask()
    np.testing.assert_array_equal(
        smoothed.binary[:, inside], (smoothed.stage2[:, inside] >= calibration.threshold).astype(np.int8)
    )
    np.testing.assert_array_equal(smoothed.stage1, panel.stage1)


def test_default_calibration_uses_in_sample_scores():
    assert ForestParams().calibrate_on == CalibrationSource.IN_SAMPLE


@pytest.mark.parametrize("source", list(CalibrationSource))
def test_reported_recall_matches_written_stage2(source):
    rng = np.random.default_rng(11)
    grid = full_grid(8, 8)
    panel = score_panel(rng.random((4, 8, 8)))
    codes = np.where(panel.stage1 > 0.7, 1, 0).astype(np.int8)
    labels = LabelPanel(city_id="test", image_dates=panel.dates, annotation_dates=panel.dates,
                        codes=codes, mask=np.ones((8, 8), dtype=bool))
    split = SplitAssignment(assignment={pid: SplitName.TEST if pid[0] == 7 else SplitName.TRAIN
                                        for pid in grid.sorted_ids()}, seed=0)
    rows = smoother_service.training_rows(panel, grid, labels, split)
    params = SMALL_FOREST.model_copy(update={"calibrate_on": source})
    fit = smoother_service.train_forest(rows.x, rows.y, params)
    calibration = smoother_service.calibrate(fit, rows.x, rows.y, 0.5)

    smoothed = smoother_service.smooth_panel(panel, grid, fit.model, calibration)
    positives = [k for k, label in zip(rows.keys, rows.y) if label == 1]
    written = np.array([smoothed.stage2[k.date_index, k.row, k.col] for k in positives])
    assert np.mean(written >= calibration.threshold) == pytest.approx(calibration.achieved_train_recall)
    if source == CalibrationSource.IN_SAMPLE:
        assert calibration.achieved_train_recall >= 0.5


def test_ring_one_neighbours_are_symmetric():
    rng = np.random.default_rng(8)
    included = frozenset((r, c) for r in range(6) for c in range(6) if rng.random() > 0.2)
    grid = PatchGrid(city_id="test", patch_size=64, rows=6, cols=6, included=included, no_analysis=frozenset())
    ids = grid.sorted_ids()
    column = GROUP_NAMES.index("ring1_mean")
    reached = np.zeros((len(ids), len(ids)), dtype=bool)
    for k, (row, col) in enumerate(ids):
        layer = np.zeros((1, 6, 6))
        layer[0, row, col] = 1.0
        panel = score_panel(layer, mask=grid.included_mask())
        reached[k] = smoother_service.build_feature_matrix(panel, grid, 0, patch_ids=ids)[:, column] > 0
    # an isolated patch falls back to its own score
    np.fill_diagonal(reached, False)
    np.testing.assert_array_equal(reached, reached.T)
    assert reached.any()


def test_one_more_tree_moves_scores_by_at_most_its_share():
    rng = np.random.default_rng(9)
    x = rng.random((300, 5))
    y = (x[:, 0] + 0.5 * rng.random(300) > 0.8).astype(float)
    model = smoother_service.train_forest(x, y, ForestParams(num_trees=20, max_depth=5, min_leaf=2)).model
    previous = smoother_service.predict_forest(model.model_copy(update={"trees": model.trees[:1]}), x)
    for k in range(1, model.num_trees):
        current = smoother_service.predict_forest(model.model_copy(update={"trees": model.trees[:k + 1]}), x)
        assert np.all(np.abs(current - previous) <= 1 / (k + 1) + 1e-12)
        assert np.all((current >= 0) & (current <= 1))
        previous = current


def test_smoothing_raises_average_precision_on_clustered_damage():
    rng = np.random.default_rng(10)
    grid = full_grid(20, 20)
    n_dates = 8
    destroyed_from = np.full((20, 20), n_dates)
    for row, col in rng.integers(2, 18, (6, 2)):
        destroyed_from[row - 1:row + 2, col - 1:col + 2] = rng.integers(2, 6)
    truth = (np.arange(n_dates)[:, None, None] >= destroyed_from[None]).astype(np.int8)
    panel = score_panel(np.clip(0.3 + 0.25 * truth + rng.normal(0, 0.2, truth.shape), 0, 1))
    labels = LabelPanel(city_id="test", image_dates=panel.dates, annotation_dates=panel.dates,
                        codes=truth, mask=np.ones((20, 20), dtype=bool))
    split = label_service.split_patches(grid.sorted_ids(), 0.7, seed=1)

    rows = smoother_service.training_rows(panel, grid, labels, split)
    fit = smoother_service.train_forest(rows.x, rows.y, ForestParams(num_trees=20, max_depth=6, min_leaf=5))
    smoothed = smoother_service.smooth_panel(panel, grid, fit.model, smoother_service.calibrate(fit, rows.x, rows.y))
    stages = {row.stage: row for row in evaluation_service.evaluate_run(smoothed, labels, split).stages}
    assert stages[Stage.STAGE2].ap_unbalanced > stages[Stage.STAGE1].ap_unbalanced + 0.05
