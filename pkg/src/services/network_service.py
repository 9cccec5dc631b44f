import itertools
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from configs import get_runtime_settings
from src.exceptions import ClassError, InputError, NumericError
from src.logging.logger import get_logger
from src.neuralnet.network import ConvNet
from src.schemas.evaluation import ScoredLabelSet
from src.schemas.labels import LabelClass, LabeledSample, LabelPanel, SampleKey, SplitAssignment, SplitName
from src.schemas.network import (
    EpochRecord,
    NetworkParams,
    NetworkSpec,
    SearchCandidate,
    SearchResult,
    TrainConfig,
    TrainingHistory,
)
from src.schemas.raster import PatchGrid, PatchId, RasterCatalog
from src.schemas.scores import ScorePanel
from src.services.evaluation_service import evaluation_service
from src.services.label_service import label_service
from src.services.raster_service import raster_service

logger = get_logger(__name__)


class SampleTensors(NamedTuple):
    """uint8 network inputs (N, 6, size, size) with float labels; scaled per batch"""
    x: np.ndarray
    y: np.ndarray


class CitySource(NamedTuple):
    catalog: RasterCatalog
    grid: PatchGrid
    labels: LabelPanel
    split: SplitAssignment


class TrainingData(NamedTuple):
    train: SampleTensors
    validation: SampleTensors
    train_keys: List[SampleKey]
    validation_keys: List[SampleKey]


class NetworkService:
    """Stage one: training, model selection and the dense scan of the CNN"""

    def train(
        self,
        spec: NetworkSpec,
        config: TrainConfig,
        train: SampleTensors,
        validation: Optional[SampleTensors] = None
    ) -> Tuple[NetworkParams, TrainingHistory]:
        """
        Mini-batch SGD on binary cross-entropy; returns the snapshot with the best
        validation AUC. With a single-class validation set the AUC is NaN and the
        last epoch is kept.
        """
        if len(train.y) == 0:
            raise InputError("Training set is empty")

        net = ConvNet(spec)
        params = net.init_params(config.weight_init_scale, np.random.default_rng([config.seed, 0]))
        history = TrainingHistory()
        if config.epochs == 0:
            return params, history

        shuffle_rng = np.random.default_rng([config.seed, 1])
        dropout_rng = np.random.default_rng([config.seed, 2])
        velocity = {name: np.zeros_like(params[name]) for name in spec.trainable_names()}
        best_auc, best_params = -np.inf, None

        epochs = tqdm(range(1, config.epochs + 1), desc="train", disable=not get_runtime_settings().progress)
        for epoch in epochs:
            order = shuffle_rng.permutation(len(train.y))
            total_loss = 0.0
            for start in range(0, len(order), config.batch_size):
                index = np.sort(order[start:start + config.batch_size])
                xb = self._scale(train.x[index])
                try:
                    _, cache = net.forward(params, xb, training=True, rng=dropout_rng, eps=config.bn_eps)
                except NumericError as e:
                    raise NumericError(f"{e} at epoch {epoch}", epoch=epoch)
                loss, grads = net.backward(params, cache, train.y[index])
                if not np.isfinite(loss):
                    raise NumericError(f"Training loss diverged at epoch {epoch}", epoch=epoch)
                for name, grad in grads.items():
                    velocity[name] = config.momentum * velocity[name] - config.learning_rate * grad
                    params.values[name] = params[name] + velocity[name]
                net.update_running_stats(params, cache, config.bn_momentum)
                total_loss += loss * len(index)

            epoch_loss = total_loss / len(order)
            val_auc = self.validation_auc(spec, params, validation)
            history.records.append(EpochRecord(epoch=epoch, loss=epoch_loss, val_auc=val_auc))
            epochs.set_postfix(loss=f"{epoch_loss:.4f}", val_auc=f"{val_auc:.4f}")
            logger.debug(f"epoch {epoch}: loss={epoch_loss:.6f} val_auc={val_auc:.6f}")

            if np.isfinite(val_auc) and val_auc > best_auc:
                best_auc, best_params = val_auc, params.copy()
                history.best_epoch = epoch

        if best_params is None:
            history.best_epoch = config.epochs
            best_params = params
        logger.info(f"Training finished: best epoch {history.best_epoch}, val AUC {history.best_val_auc:.4f}")
        return best_params, history

    def validation_auc(self, spec: NetworkSpec, params: NetworkParams, validation: Optional[SampleTensors]) -> float:
        if validation is None or len(validation.y) == 0:
            return float("nan")
        scores = self.predict(spec, params, validation.x)
        try:
            return evaluation_service.roc_auc(ScoredLabelSet.from_arrays(scores, validation.y))
        except ClassError:
            return float("nan")

    def predict(
        self,
        spec: NetworkSpec,
        params: NetworkParams,
        x: np.ndarray,
        batch_size: Optional[int] = None
    ) -> np.ndarray:
        """Inference-mode scores; uint8 input is scaled to [0, 1] batch by batch"""
        batch_size = batch_size or get_runtime_settings().scan_batch_size
        net = ConvNet(spec)
        scores = np.empty(len(x))
        for start in range(0, len(x), batch_size):
            scores[start:start + batch_size], _ = net.forward(params, self._scale(x[start:start + batch_size]))
        return scores

    def expand_grid(self, grid: Dict[str, list], base: Optional[NetworkSpec] = None) -> List[NetworkSpec]:
        """Cartesian product of the grid values over a base spec, in key order; invalid combinations are skipped"""
        base = base or NetworkSpec()
        keys = list(grid)
        specs = []
        for values in itertools.product(*(grid[key] for key in keys)):
            try:
                specs.append(NetworkSpec(**{**base.model_dump(), **dict(zip(keys, values))}))
            except ValidationError as e:
                logger.warning(f"Skipping grid point {dict(zip(keys, values))}: {e.errors()[0]['msg']}")
        return specs

    def hyperparameter_search(
        self,
        candidates: Sequence[Tuple[NetworkSpec, TrainConfig]],
        train: SampleTensors,
        validation: SampleTensors
    ) -> Tuple[SearchResult, NetworkParams, TrainingHistory]:
        """Train every candidate; best validation AUC wins, ties go to fewer parameters, then grid order"""
        if not candidates:
            raise InputError("Hyperparameter grid is empty")

        results, best_key, best = [], None, None
        for index, (spec, config) in enumerate(candidates):
            logger.info(f"Search candidate {index + 1}/{len(candidates)}: {spec.model_dump(mode='json')}")
            params, history = self.train(spec, config, train, validation)
            auc = history.best_val_auc if history.records else float("nan")
            results.append(SearchCandidate(
                spec=spec, config=config, val_auc=auc, parameter_count=spec.parameter_count()
            ))
            key = (auc if np.isfinite(auc) else -np.inf, -spec.parameter_count())
            if best_key is None or key > best_key:
                best_key, best = key, (index, params, history)

        index, params, history = best
        logger.info(f"Search selected candidate {index + 1} with val AUC {results[index].val_auc:.4f}")
        return SearchResult(candidates=results, best_index=index), params, history

    def dense_scan(
        self,
        spec: NetworkSpec,
        params: NetworkParams,
        grid: PatchGrid,
        catalog: RasterCatalog,
        jobs: Optional[int] = None
    ) -> ScorePanel:
        """Stage-1 score for every included patch (no-analysis zones too) at every post date"""
        if not catalog.post_dates:
            raise InputError(f"City {grid.city_id} has no post images to scan")
        jobs = jobs or get_runtime_settings().jobs
        ids = grid.sorted_ids()
        rows = np.array([r for r, _ in ids], dtype=int)
        cols = np.array([c for _, c in ids], dtype=int)
        pre = catalog.load_pre()

        def scan_date(when):
            try:
                post = catalog.load(when)
            except (KeyError, FileNotFoundError) as e:
                raise InputError(f"Raster for {grid.city_id} at {when} is missing: {e}")
            batch_size = get_runtime_settings().scan_batch_size
            scores = np.empty(len(ids))
            for start in range(0, len(ids), batch_size):
                x = raster_service.extract_batch(pre, post, grid, ids[start:start + batch_size])
                scores[start:start + batch_size], _ = ConvNet(spec).forward(params, x)
            return scores

        stage1 = np.full((len(catalog.post_dates), grid.rows, grid.cols), np.nan)
        progress = tqdm(total=len(catalog.post_dates), desc=f"scan {grid.city_id}",
                        disable=not get_runtime_settings().progress)
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            for t, scores in enumerate(executor.map(scan_date, catalog.post_dates)):
                stage1[t, rows, cols] = scores
                progress.update(1)
        progress.close()

        logger.info(f"Scanned {len(ids)} patches x {len(catalog.post_dates)} dates for {grid.city_id}")
        return ScorePanel(city_id=grid.city_id, dates=list(catalog.post_dates),
                          mask=grid.included_mask(), stage1=stage1)

    def gradient_check(
        self,
        spec: NetworkSpec,
        params: NetworkParams,
        x: np.ndarray,
        labels: np.ndarray,
        eps: float = 1e-3,
        dropout_seed: int = 0,
        floor: float = 1e-6
    ) -> Tuple[float, Dict[str, float]]:
        """
        Compare backprop gradients with central finite differences in training mode.

        The dropout generator is reseeded for every evaluation so all passes share one mask.
        Relative error is |a - n| / max(|a|, |n|, floor); returns the maximum and the per-parameter maxima.
        """
        net = ConvNet(spec)
        _, cache = net.forward(params, x, training=True, rng=np.random.default_rng(dropout_seed))
        _, analytic = net.backward(params, cache, labels)

        per_param = {}
        shifted = params.copy()
        for name in spec.trainable_names():
            values = shifted.values[name]
            worst = 0.0
            for flat_index in range(values.size):
                index = np.unravel_index(flat_index, values.shape)
                original = values[index]
                values[index] = original + eps
                plus = net.loss(shifted, x, labels, True, np.random.default_rng(dropout_seed))
                values[index] = original - eps
                minus = net.loss(shifted, x, labels, True, np.random.default_rng(dropout_seed))
                values[index] = original
                numeric = (plus - minus) / (2 * eps)
                a = analytic[name][index]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
            per_param[name] = worst
        return max(per_param.values()), per_param

    def prepare_training_data(
        self,
        sources: Sequence[CitySource],
        config: TrainConfig
    ) -> TrainingData:
        """
        Pool Train-split samples of every city, hold out validation patches, cap the pools
        and balance the training side. Test-split patches are never touched.
        """
        train_samples, validation_samples = [], []
        for source in sources:
            train_ids = source.split.ids(SplitName.TRAIN)
            held_out = {
                pid for pid in train_ids
                if label_service.hash_unit((config.seed, "validation") + tuple(pid)) < config.validation_fraction
            }
            analysis = set(source.grid.analysis_ids())
            fit_ids = [pid for pid in train_ids if pid not in held_out and pid in analysis]
            val_ids = [pid for pid in train_ids if pid in held_out and pid in analysis]
            train_samples += label_service.labeled_samples(source.labels, source.split, SplitName.TRAIN, fit_ids)
            validation_samples += label_service.labeled_samples(source.labels, source.split, SplitName.TRAIN, val_ids)

        train_samples = self._cap_training(train_samples, config.max_train_samples, config.seed)
        validation_samples = self._cap_validation(validation_samples, config.max_validation_samples, config.seed)
        balanced = label_service.balance_training_set(train_samples)

        by_city = {source.grid.city_id: source for source in sources}
        train_tensors = self.assemble(by_city, balanced)
        validation_tensors = self.assemble(by_city, validation_samples)
        logger.info(
            f"Training pool: {len(balanced)} balanced samples from {len(train_samples)} distinct, "
            f"{len(validation_samples)} validation samples"
        )
        return TrainingData(
            train=train_tensors,
            validation=validation_tensors,
            train_keys=[s.key for s in balanced],
            validation_keys=[s.key for s in validation_samples]
        )

    def assemble(self, sources: Dict[str, CitySource], samples: Sequence[LabeledSample]) -> SampleTensors:
        """Cut the uint8 pre/post stacks for the samples, loading each raster once"""
        if not samples:
            return SampleTensors(x=np.zeros((0, 6, 1, 1), dtype=np.uint8), y=np.zeros(0))
        size = next(iter(sources.values())).grid.patch_size
        x = np.empty((len(samples), 6, size, size), dtype=np.uint8)
        y = np.array([1.0 if s.label == LabelClass.DESTROYED else 0.0 for s in samples])

        positions: Dict[Tuple[str, int], List[int]] = defaultdict(list)
        for position, sample in enumerate(samples):
            positions[(sample.key.city_id, sample.key.date_index)].append(position)

        pre_cache = {}
        for (city_id, date_index), where in sorted(positions.items()):
            source = sources[city_id]
            if city_id not in pre_cache:
                pre_cache[city_id] = source.catalog.load_pre()
            post = source.catalog.load(source.catalog.post_dates[date_index])
            ids: List[PatchId] = [(samples[i].key.row, samples[i].key.col) for i in where]
            x[where] = raster_service.extract_batch(pre_cache[city_id], post, source.grid, ids, raw=True)
        return SampleTensors(x=x, y=y)

    def _cap_training(self, samples: List[LabeledSample], cap: Optional[int], seed: int) -> List[LabeledSample]:
        """Keep up to cap/2 positives and fill the rest with negatives"""
        if cap is None or len(samples) <= cap:
            return samples
        rng = np.random.default_rng([seed, 3])
        positives = [s for s in samples if s.label == LabelClass.DESTROYED]
        negatives = [s for s in samples if s.label == LabelClass.INTACT]
        n_pos = min(len(positives), cap // 2)
        n_neg = min(len(negatives), cap - n_pos)
        keep_pos = sorted(rng.choice(len(positives), n_pos, replace=False)) if n_pos else []
        keep_neg = sorted(rng.choice(len(negatives), n_neg, replace=False)) if n_neg else []
        return [positives[i] for i in keep_pos] + [negatives[i] for i in keep_neg]

    def _cap_validation(self, samples: List[LabeledSample], cap: Optional[int], seed: int) -> List[LabeledSample]:
        """Proportional cap that keeps the natural class imbalance (and at least one positive)"""
        if cap is None or len(samples) <= cap:
            return samples
        rng = np.random.default_rng([seed, 4])
        positives = [s for s in samples if s.label == LabelClass.DESTROYED]
        negatives = [s for s in samples if s.label == LabelClass.INTACT]
        n_pos = min(len(positives), max(1, round(cap * len(positives) / len(samples)))) if positives else 0
        n_neg = min(len(negatives), cap - n_pos)
        keep_pos = sorted(rng.choice(len(positives), n_pos, replace=False)) if n_pos else []
        keep_neg = sorted(rng.choice(len(negatives), n_neg, replace=False)) if n_neg else []
        return [positives[i] for i in keep_pos] + [negatives[i] for i in keep_neg]

    def _scale(self, x: np.ndarray) -> np.ndarray:
        if x.dtype == np.uint8:
            return x.astype(np.float64) / 255.0
        return x


network_service = NetworkService()
