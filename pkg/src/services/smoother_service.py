import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from configs import get_runtime_settings
from src.exceptions import ClassError, PatchLookupError, ShapeError
from src.forest.decision_tree import fit_tree, predict_tree
from src.logging.logger import get_logger
from src.schemas.forest import CalibrationSource, CutoffCalibration, ForestParams, RandomForestModel
from src.schemas.labels import LabelClass, LabelPanel, SampleKey, SplitAssignment, SplitName
from src.schemas.raster import PatchGrid, PatchId
from src.schemas.scores import ScorePanel

logger = get_logger(__name__)

RING_1 = [(dr, dc) for dr in range(-1, 2) for dc in range(-1, 2) if max(abs(dr), abs(dc)) == 1]
RING_2 = [(dr, dc) for dr in range(-2, 3) for dc in range(-2, 3) if max(abs(dr), abs(dc)) == 2]
LAG_OFFSETS = (0, -1, -2)
LEAD_OFFSETS = (1, 2)
GROUP_NAMES = ("own", "ring1_mean", "ring1_std", "ring2_mean", "ring2_std")


class ForestFit(NamedTuple):
    model: RandomForestModel
    oob_scores: np.ndarray


class ForestRows(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    keys: List[SampleKey]


def feature_names(include_leads: bool = False) -> List[str]:
    names = [f"{name}_t{offset}" for offset in LAG_OFFSETS for name in GROUP_NAMES]
    names += [f"missing_t{offset}" for offset in LAG_OFFSETS[1:]]
    if include_leads:
        names += [f"{name}_t+{offset}" for offset in LEAD_OFFSETS for name in GROUP_NAMES]
        names += [f"missing_t+{offset}" for offset in LEAD_OFFSETS]
    return names


class SmootherService:
    """Stage two: spatio-temporal lag features, random forest, recall cutoff and binarization"""

    def build_features(
        self,
        panel: ScorePanel,
        grid: PatchGrid,
        patch_id: PatchId,
        when,
        include_leads: bool = False
    ) -> np.ndarray:
        """Feature vector of one patch, computed neighbour by neighbour"""
        t = panel.date_index(when)
        row, col = patch_id
        if not panel.mask[row, col]:
            raise PatchLookupError(f"Patch {patch_id} has no stage-1 score in {panel.city_id}")

        def group(index: int) -> List[float]:
            layer = panel.stage1[index]
            own = float(layer[row, col])
            values = [own]
            for ring in (RING_1, RING_2):
                total, count = 0.0, 0
                neighbours = []
                for dr, dc in ring:
                    r, c = row + dr, col + dc
                    if 0 <= r < grid.rows and 0 <= c < grid.cols and panel.mask[r, c]:
                        neighbours.append(float(layer[r, c]))
                        total = total + neighbours[-1]
                        count += 1
                if count == 0:
                    values += [own, 0.0]
                    continue
                mean = total / count
                squares = 0.0
                for value in neighbours:
                    squares = squares + (value - mean) * (value - mean)
                values += [mean, math.sqrt(squares / count)]
            return values

        current = group(t)
        features, flags = list(current), []
        for offset in LAG_OFFSETS[1:]:
            present = 0 <= t + offset < len(panel.dates)
            features += group(t + offset) if present else current
            flags.append(0.0 if present else 1.0)
        features += flags
        if include_leads:
            flags = []
            for offset in LEAD_OFFSETS:
                present = 0 <= t + offset < len(panel.dates)
                features += group(t + offset) if present else current
                flags.append(0.0 if present else 1.0)
            features += flags
        return np.array(features)

    def build_feature_matrix(
        self,
        panel: ScorePanel,
        grid: PatchGrid,
        date_index: int,
        include_leads: bool = False,
        patch_ids: Optional[Sequence[PatchId]] = None
    ) -> np.ndarray:
        """Vectorised build_features for many patches at one date; rows follow `patch_ids` (default: sorted included)"""
        if not 0 <= date_index < len(panel.dates):
            raise PatchLookupError(f"Date index {date_index} outside the score panel of {panel.city_id}")
        ids = list(patch_ids) if patch_ids is not None else grid.sorted_ids()
        rows = np.array([r for r, _ in ids], dtype=int)
        cols = np.array([c for _, c in ids], dtype=int)
        if not panel.mask[rows, cols].all():
            raise PatchLookupError("Feature rows requested for patches without stage-1 scores")

        groups = {}

        def group(index: int) -> np.ndarray:
            if index not in groups:
                groups[index] = self._layer_group(panel.stage1[index], panel.mask)[:, rows, cols].T
            return groups[index]

        current = group(date_index)
        blocks, flags = [current], []
        for offset in LAG_OFFSETS[1:]:
            present = 0 <= date_index + offset < len(panel.dates)
            blocks.append(group(date_index + offset) if present else current)
            flags.append(0.0 if present else 1.0)
        blocks.append(np.tile(flags, (len(ids), 1)))
        if include_leads:
            flags = []
            for offset in LEAD_OFFSETS:
                present = 0 <= date_index + offset < len(panel.dates)
                blocks.append(group(date_index + offset) if present else current)
                flags.append(0.0 if present else 1.0)
            blocks.append(np.tile(flags, (len(ids), 1)))
        return np.hstack(blocks)

    def _layer_group(self, layer: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """(5, rows, cols): own score, ring-1 mean/std, ring-2 mean/std"""
        rows, cols = layer.shape
        padded = np.full((rows + 4, cols + 4), np.nan)
        padded[2:-2, 2:-2] = layer
        valid_padded = np.zeros((rows + 4, cols + 4), dtype=bool)
        valid_padded[2:-2, 2:-2] = mask

        out = [layer]
        for ring in (RING_1, RING_2):
            shifted = [padded[2 + dr:2 + dr + rows, 2 + dc:2 + dc + cols] for dr, dc in ring]
            valid = [valid_padded[2 + dr:2 + dr + rows, 2 + dc:2 + dc + cols] for dr, dc in ring]
            total = np.zeros(layer.shape)
            count = np.zeros(layer.shape, dtype=int)
            for values, ok in zip(shifted, valid):
                total = total + np.where(ok, values, 0.0)
                count += ok
            has = count > 0
            mean = np.where(has, total / np.maximum(count, 1), layer)
            squares = np.zeros(layer.shape)
            for values, ok in zip(shifted, valid):
                squares = squares + np.where(ok, (values - mean) * (values - mean), 0.0)
            std = np.where(has, np.sqrt(squares / np.maximum(count, 1)), 0.0)
            out += [mean, std]
        return np.stack(out)

    def training_rows(
        self,
        panel: ScorePanel,
        grid: PatchGrid,
        labels: LabelPanel,
        split: SplitAssignment,
        include_leads: bool = False
    ) -> ForestRows:
        """Features and labels of Train-split analysis patches with a known label, every date"""
        train_ids = set(split.ids(SplitName.TRAIN))
        ids = [pid for pid in grid.analysis_ids() if pid in train_ids and labels.mask[pid]]
        xs, ys, keys = [], [], []
        if ids:
            rows = np.array([r for r, _ in ids])
            cols = np.array([c for _, c in ids])
            for t in range(len(panel.dates)):
                codes = labels.codes[t, rows, cols]
                known = codes != LabelClass.UNKNOWN
                if not known.any():
                    continue
                chosen = [pid for pid, keep in zip(ids, known) if keep]
                xs.append(self.build_feature_matrix(panel, grid, t, include_leads, chosen))
                ys.append((codes[known] == LabelClass.DESTROYED).astype(np.float64))
                keys += [SampleKey(panel.city_id, r, c, t) for r, c in chosen]
        width = len(feature_names(include_leads))
        if not xs:
            return ForestRows(x=np.zeros((0, width)), y=np.zeros(0), keys=[])
        return ForestRows(x=np.vstack(xs), y=np.concatenate(ys), keys=keys)

    def cap_rows(self, rows: ForestRows, cap: Optional[int], seed: int) -> ForestRows:
        if cap is None or len(rows.y) <= cap:
            return rows
        keep = np.sort(np.random.default_rng([seed, 5]).choice(len(rows.y), cap, replace=False))
        return ForestRows(x=rows.x[keep], y=rows.y[keep], keys=[rows.keys[i] for i in keep])

    def train_forest(
        self,
        x: np.ndarray,
        y: np.ndarray,
        params: ForestParams,
        seed: Optional[int] = None,
        jobs: Optional[int] = None
    ) -> ForestFit:
        """
        Fit `num_trees` Gini trees, each on its own bootstrap resample. Tree i uses the
        generator seeded with (seed, i), so results do not depend on thread scheduling.
        """
        y = np.asarray(y, dtype=np.float64)
        positives = int(y.sum())
        if positives == 0 or positives == len(y):
            raise ClassError(f"Forest training needs both classes, got {positives} positives of {len(y)}")
        seed = params.bootstrap_seed if seed is None else seed
        jobs = jobs or get_runtime_settings().jobs
        n = len(y)

        def grow(index: int):
            rng = np.random.default_rng([seed, index])
            sample = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
            tree = fit_tree(x[sample], y[sample], params.max_depth, params.min_leaf,
                            params.features_per_split, rng)
            out_of_bag = np.ones(n, dtype=bool)
            out_of_bag[sample] = False
            return tree, out_of_bag

        with ThreadPoolExecutor(max_workers=jobs) as executor:
            grown = list(executor.map(grow, range(params.num_trees)))

        oob_sum, oob_count = np.zeros(n), np.zeros(n)
        for tree, out_of_bag in grown:
            if out_of_bag.any():
                oob_sum[out_of_bag] += predict_tree(tree, x[out_of_bag])
                oob_count[out_of_bag] += 1
        oob_scores = np.where(oob_count > 0, oob_sum / np.maximum(oob_count, 1), np.nan)

        model = RandomForestModel(params=params, n_features=x.shape[1], trees=[tree for tree, _ in grown])
        logger.info(
            f"Forest: {params.num_trees} trees on {n} rows ({positives} positives), "
            f"max depth reached {max(tree.depth() for tree in model.trees)}"
        )
        return ForestFit(model=model, oob_scores=oob_scores)

    def predict_forest(self, model: RandomForestModel, x: np.ndarray) -> np.ndarray:
        """Mean leaf value across trees"""
        x = np.atleast_2d(x)
        if x.shape[1] != model.n_features:
            raise ShapeError(f"Forest expects {model.n_features} features, got {x.shape[1]}")
        total = np.zeros(len(x))
        for tree in model.trees:
            total += predict_tree(tree, x)
        return total / model.num_trees

    def calibration_scores(self, fit: ForestFit, x: np.ndarray) -> np.ndarray:
        """Out-of-bag scores where available, in-sample scores elsewhere"""
        if fit.model.params.calibrate_on == CalibrationSource.IN_SAMPLE:
            return self.predict_forest(fit.model, x)
        missing = np.isnan(fit.oob_scores)
        if not missing.any():
            return fit.oob_scores
        scores = fit.oob_scores.copy()
        scores[missing] = self.predict_forest(fit.model, x[missing])
        logger.debug(f"{int(missing.sum())} rows were never out of bag; using in-sample scores")
        return scores

    def calibrate_cutoff(self, scores: np.ndarray, labels: np.ndarray, target_recall: float = 0.5) -> CutoffCalibration:
        """Largest threshold whose recall on the given labels reaches the target"""
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        positive_scores = scores[labels == 1]
        n_positives = len(positive_scores)
        if n_positives == 0:
            raise ClassError("Cutoff calibration needs at least one positive")

        tiers = np.unique(positive_scores)[::-1]
        caught = np.array([np.sum(positive_scores >= tier) for tier in tiers])
        reaching = np.flatnonzero(caught >= target_recall * n_positives - 1e-12)
        index = int(reaching[0])
        return CutoffCalibration(
            threshold=float(tiers[index]),
            achieved_train_recall=float(caught[index] / n_positives),
            target_recall=target_recall,
            n_positives=n_positives
        )

    def calibrate(
        self,
        fit: ForestFit,
        x: np.ndarray,
        y: np.ndarray,
        target_recall: float = 0.5
    ) -> CutoffCalibration:
        """
        Cutoff chosen on `calibration_scores`, with the achieved recall measured on
        the in-sample scores that smooth_panel writes as stage 2.
        """
        calibration = self.calibrate_cutoff(self.calibration_scores(fit, x), y, target_recall)
        if fit.model.params.calibrate_on == CalibrationSource.IN_SAMPLE:
            return calibration
        positive_scores = self.predict_forest(fit.model, x[np.asarray(y) == 1])
        achieved = float(np.mean(positive_scores >= calibration.threshold))
        logger.info(
            f"Out-of-bag cutoff {calibration.threshold:.4f}: recall {calibration.achieved_train_recall:.4f} "
            f"out of bag, {achieved:.4f} on the stage-2 scores"
        )
        return calibration.model_copy(update={"achieved_train_recall": achieved})

    def smooth_panel(
        self,
        panel: ScorePanel,
        grid: PatchGrid,
        model: RandomForestModel,
        calibration: CutoffCalibration
    ) -> ScorePanel:
        """Stage-2 score and binary call for every included patch at every date"""
        include_leads = model.params.include_leads
        ids = grid.sorted_ids()
        rows = np.array([r for r, _ in ids], dtype=int)
        cols = np.array([c for _, c in ids], dtype=int)
        stage2 = np.full(panel.stage1.shape, np.nan)
        binary = np.zeros(panel.stage1.shape, dtype=np.int8)
        for t in range(len(panel.dates)):
            scores = self.predict_forest(model, self.build_feature_matrix(panel, grid, t, include_leads, ids))
            stage2[t, rows, cols] = scores
            binary[t, rows, cols] = scores >= calibration.threshold
        logger.info(
            f"Smoothed {panel.city_id}: {int(binary[-1].sum())} patches flagged at the final date "
            f"(threshold {calibration.threshold:.4f})"
        )
        return panel.with_smoothing(stage2, binary)


smoother_service = SmootherService()
