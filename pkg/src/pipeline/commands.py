"""
Pipeline commands.

Every command returns a status dictionary {status, message, artifacts}. Stage
failures are logged and re-raised as StageError with the stage name; whatever
the stage already wrote stays on disk for inspection.
"""
import shutil
from concurrent.futures import ThreadPoolExecutor
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from configs import get_runtime_settings
from src.exceptions import ConfigurationError, InputError, StageError
from src.logging.logger import get_logger
from src.pipeline.callbacks import after_stage, before_stage
from src.pipeline.plots import plot_event_study, plot_pr_curves, plot_score_map
from src.pipeline.report import audit_split_hygiene, summary_frame, summary_row, truth_share
from src.schemas.evaluation import Stage
from src.schemas.labels import SplitName
from src.schemas.run import RunConfig
from src.services.evaluation_service import evaluation_service
from src.services.event_study_service import event_study_service
from src.services.label_service import label_service
from src.services.network_service import CitySource, network_service
from src.services.raster_service import raster_service
from src.services.smoother_service import ForestRows, smoother_service
from src.services.synth_service import synth_service
from src.storage.artifact_store import RunArtifactStore
from src.storage.formats import (
    annotation_file_name,
    discover_rasters,
    evaluation_payload,
    export_grid_csv,
    load_annotation_source,
    load_aoi,
    load_events,
    load_grid_csv,
    load_label_panel,
    load_model,
    load_score_panel,
    load_split,
    read_csv,
    read_json,
    save_annotations,
    save_aoi,
    save_coefficients,
    save_events,
    save_forest,
    save_history,
    save_label_panel,
    save_model,
    save_pr_curve,
    save_raster,
    save_roc_curve,
    save_score_panel,
    save_split,
    write_csv,
    write_json,
)

logger = get_logger(__name__)

SAMPLE_KEY_COLUMNS = ["city_id", "row", "col", "date_index"]
PIPELINE_STAGES = ["tile", "label", "split", "train", "scan", "smooth", "evaluate"]


class RunContext(NamedTuple):
    config: RunConfig
    store: RunArtifactStore
    resume: bool = False


class CityArtifacts:
    """Per-city artifact paths inside the output directory"""

    def __init__(self, config: RunConfig, city_id: str):
        base = config.city_dir(city_id)
        self.city_id = city_id
        self.inputs = config.resolved_paths(city_id)
        self.city_summary = base / "input" / "city.json"
        self.grid = base / "grid.csv"
        self.labels = base / "labels.csv"
        self.split = base / "split.csv"
        self.stage1 = base / "stage1_scores.csv"
        self.smoothed = base / "scores.csv"
        self.evaluation = base / "evaluation.json"
        self.curves = base / "curves"
        self.pr_plot = base / "pr_curves.svg"
        self.score_map = base / "score_map.svg"
        self.event_mapping = base / "event_mapping.json"
        self.coefficients = base / "event_coefficients.csv"
        self.event_plot = base / "event_study.svg"
        self.truth_check = base / "truth_check.json"

    def scores(self, store: RunArtifactStore) -> Path:
        """Smoothed scores when the smooth stage built them from the current stage-1 scores, stage-1 scores otherwise"""
        if not self.smoothed.exists():
            return self.stage1
        if store.built_from("smooth", self.smoothed, [self.stage1]):
            return self.smoothed
        logger.warning(f"{self.smoothed} was not built from the current {self.stage1.name}; using stage-1 scores")
        return self.stage1

    def score_inputs(self, store: RunArtifactStore) -> List[Path]:
        return list(dict.fromkeys([self.stage1, self.scores(store)]))


class RunArtifacts:
    def __init__(self, config: RunConfig):
        base = config.output_path
        self.model = base / "model" / "model.json"
        self.history = base / "model" / "history.csv"
        self.search = base / "model" / "search.csv"
        self.train_samples = base / "model" / "train_samples.csv"
        self.forest = base / "forest" / "forest.json"
        self.forest_rows = base / "forest" / "forest_rows.csv"
        self.summary = base / "summary.csv"
        self.audit = base / "audit.json"


# ---------------------------------------------------------------- stage plumbing

def _run_stage(
    ctx: RunContext,
    stage: str,
    city_id: Optional[str],
    inputs: Sequence[Path],
    config_hash: str,
    work: Callable[[], Tuple[str, List[Path]]]
) -> Dict[str, Any]:
    key = f"{stage}:{city_id}" if city_id else stage
    before_stage(stage, city_id, {"resume": ctx.resume, "inputs": [str(p) for p in inputs]})

    if ctx.resume and ctx.store.is_fresh(key, inputs, config_hash):
        response = {
            "status": "skipped",
            "message": "Outputs are up to date",
            "artifacts": [str(p) for p in ctx.store.outputs(key)],
        }
        after_stage(stage, city_id, response)
        return response

    started = datetime.now(timezone.utc)
    try:
        # 1. Run the stage body
        message, outputs = work()

        # 2. Record inputs and outputs in the manifest
        ctx.store.record(key, inputs, outputs, started, config_hash)
    except Exception as e:
        response = {"status": "error", "message": str(e), "artifacts": []}
        after_stage(stage, city_id, response)
        raise StageError(stage, e) from e

    response = {"status": "success", "message": message, "artifacts": [str(p) for p in outputs]}
    after_stage(stage, city_id, response)
    return response


def _merge(responses: Sequence[Dict[str, Any]], empty_message: str = "Nothing to do") -> Dict[str, Any]:
    if not responses:
        return {"status": "skipped", "message": empty_message, "artifacts": []}
    statuses = {r["status"] for r in responses}
    return {
        "status": "skipped" if statuses == {"skipped"} else "success",
        "message": "; ".join(r["message"] for r in responses),
        "artifacts": [a for r in responses for a in r["artifacts"]],
    }


def _city_ids(config: RunConfig) -> List[str]:
    return [city.city_id for city in config.cities]


def _catalog(config: RunConfig, city_id: str):
    catalog = discover_rasters(config.resolved_paths(city_id).rasters)
    if catalog.city_id != city_id:
        raise ConfigurationError(
            f"Rasters in {config.resolved_paths(city_id).rasters} belong to {catalog.city_id}, not {city_id}"
        )
    return catalog


def _city_source(config: RunConfig, city_id: str) -> CitySource:
    files = CityArtifacts(config, city_id)
    catalog = _catalog(config, city_id)
    grid = load_grid_csv(files.grid)
    return CitySource(
        catalog=catalog,
        grid=grid,
        labels=load_label_panel(files.labels, grid, image_dates=catalog.post_dates),
        split=load_split(files.split, config.split.seed, config.split.train_fraction)
    )


def _keys_frame(keys) -> pd.DataFrame:
    return pd.DataFrame(sorted(set(tuple(k) for k in keys)), columns=SAMPLE_KEY_COLUMNS)


# ---------------------------------------------------------------- synth

def cmd_synth(ctx: RunContext) -> Dict[str, Any]:
    """Render every synthetic city: rasters, AOI, per-date annotations, events and the truth panel"""
    cities = [city.city_id for city in ctx.config.cities if city.synthetic]
    return _merge([_synth_city(ctx, city_id) for city_id in cities], "No synthetic cities configured")


def _synth_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    synth = config.synth
    files = CityArtifacts(config, city_id)
    paths = files.inputs

    def work():
        # 1. Fresh input directory
        shutil.rmtree(paths.rasters.parent, ignore_errors=True)
        paths.rasters.mkdir(parents=True)

        # 2. City model
        city = synth_service.generate_city(
            extent=synth.extent,
            building_density=synth.building_density,
            destruction_share=synth.destruction_share,
            seed=config.city_seed(city_id),
            date_count=synth.render.date_count,
            clustered=synth.clustered,
            no_analysis_zone=synth.no_analysis_zone,
            city_id=city_id
        )

        # 3. Rasters, rendered in parallel and written as they finish
        def render_one(index: int):
            raster = synth_service.render(city, synth.render, index)
            save_raster(raster, paths.rasters / f"{city_id}_{raster.capture_date.isoformat()}.png")
            return raster if index == 0 else None

        with ThreadPoolExecutor(max_workers=get_runtime_settings().jobs) as executor:
            pre = list(executor.map(render_one, range(synth.render.date_count)))[0]

        # 4. AOIs, annotations per annotation date, events
        aois = synth_service.city_aois(city)
        save_aoi(aois, paths.aoi)
        annotations = synth_service.emit_annotations(city, synth.render)
        paths.annotations.mkdir(parents=True, exist_ok=True)
        for when in synth_service.annotation_dates(city, synth.render):
            save_annotations([a for a in annotations if a.date == when], paths.annotations / annotation_file_name(when))
        save_events(synth_service.emit_events(city, synth.event_share, synth.event_decoys, config.city_seed(city_id)),
                    paths.events)

        # 5. Ground truth over the grid the pipeline will build
        grid = raster_service.build_grid(pre, aois, config.patch_size)
        save_label_panel(synth_service.ground_truth_panel(city, grid), paths.truth)
        write_json({
            "city_id": city_id,
            "extent": city.extent,
            "buildings": len(city.buildings),
            "destroyed": len(city.destruction_schedule),
            "destruction_schedule": {str(k): v for k, v in city.destruction_schedule.items()},
            "no_analysis_zone": city.no_analysis_zone.model_dump() if city.no_analysis_zone else None,
        }, files.city_summary)

        message = (
            f"{city_id}: {synth.render.date_count} rasters, {len(city.buildings)} buildings, "
            f"{len(city.destruction_schedule)} destroyed, {len(annotations)} annotations"
        )
        outputs = [paths.rasters, paths.aoi, paths.annotations, paths.events, paths.truth, files.city_summary]
        return message, outputs

    return _run_stage(ctx, "synth", city_id, [], config.section_hash("synth", "patch_size", "cities"), work)


# ---------------------------------------------------------------- tile, label, split

def cmd_tile(ctx: RunContext) -> Dict[str, Any]:
    return _merge([_tile_city(ctx, city_id) for city_id in _city_ids(ctx.config)])


def _tile_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    files = CityArtifacts(config, city_id)

    def work():
        config.validate_paths(city_id)
        catalog = _catalog(config, city_id)
        grid = raster_service.build_grid(catalog.load_pre(), load_aoi(files.inputs.aoi), config.patch_size)
        export_grid_csv(grid, files.grid)
        message = f"{city_id}: {len(grid.included)} patches ({len(grid.no_analysis)} in no-analysis zones)"
        return message, [files.grid]

    inputs = [files.inputs.rasters, files.inputs.aoi]
    return _run_stage(ctx, "tile", city_id, inputs, config.section_hash("patch_size"), work)


def cmd_label(ctx: RunContext) -> Dict[str, Any]:
    return _merge([_label_city(ctx, city_id) for city_id in _city_ids(ctx.config)])


def _label_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    files = CityArtifacts(config, city_id)

    def work():
        grid = load_grid_csv(files.grid)
        catalog = _catalog(config, city_id)
        annotations, file_dates = load_annotation_source(files.inputs.annotations)
        declared = config.city(city_id).annotation_dates
        annotation_dates = [date.fromisoformat(d) for d in declared] if declared else file_dates
        panel = label_service.build_label_panel(
            grid, catalog.load_pre(), annotations, catalog.post_dates, annotation_dates, config.annotation_binding
        )
        save_label_panel(panel, files.labels)
        summary = label_service.label_summary(panel)
        message = (
            f"{city_id}: {summary['labeled_samples']} labeled samples, "
            f"share destroyed {summary['share_destroyed']:.4f}"
        )
        return message, [files.labels]

    inputs = [files.grid, files.inputs.rasters, files.inputs.annotations]
    return _run_stage(ctx, "label", city_id, inputs, config.section_hash("annotation_binding", "cities"), work)


def cmd_split(ctx: RunContext) -> Dict[str, Any]:
    return _merge([_split_city(ctx, city_id) for city_id in _city_ids(ctx.config)])


def _split_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    files = CityArtifacts(config, city_id)

    def work():
        grid = load_grid_csv(files.grid)
        split = label_service.split_patches(grid.sorted_ids(), config.split.train_fraction, config.split.seed)
        save_split(split, files.split)
        train = len(split.ids(SplitName.TRAIN))
        return f"{city_id}: {train} train, {len(split.assignment) - train} test patches", [files.split]

    return _run_stage(ctx, "split", city_id, [files.grid], config.section_hash("split"), work)


# ---------------------------------------------------------------- train and scan

def cmd_train(ctx: RunContext) -> Dict[str, Any]:
    """Stage one: pooled, balanced CNN training over the Train split of every city"""
    config = ctx.config
    run = RunArtifacts(config)
    city_ids = _city_ids(config)

    def work():
        # 1. Pooled training and validation tensors
        sources = [_city_source(config, city_id) for city_id in city_ids]
        data = network_service.prepare_training_data(sources, config.train)
        outputs = [run.model, run.history, run.train_samples]

        # 2. Fixed spec or hyperparameter search
        if config.network.search_grid:
            specs = network_service.expand_grid(config.network.search_grid, config.network.spec)
            result, params, history = network_service.hyperparameter_search(
                [(spec, config.train) for spec in specs], data.train, data.validation
            )
            spec = result.best.spec
            frame = pd.DataFrame([
                {**c.spec.model_dump(mode="json"), "val_auc": c.val_auc, "parameter_count": c.parameter_count,
                 "selected": index == result.best_index}
                for index, c in enumerate(result.candidates)
            ])
            write_csv(frame, run.search)
            outputs.append(run.search)
        else:
            spec = config.network.spec
            params, history = network_service.train(spec, config.train, data.train, data.validation)

        # 3. Model, history and the sample keys the audit checks
        save_model(spec, params, run.model)
        save_history(history, run.history)
        keys = pd.concat([
            _keys_frame(data.train_keys).assign(role="train"),
            _keys_frame(data.validation_keys).assign(role="validation"),
        ], ignore_index=True)
        write_csv(keys, run.train_samples)
        message = (
            f"Trained on {len(data.train.y)} balanced samples, best epoch {history.best_epoch}, "
            f"validation AUC {history.best_val_auc:.4f}"
        )
        return message, outputs

    inputs = []
    for city_id in city_ids:
        files = CityArtifacts(config, city_id)
        inputs += [files.inputs.rasters, files.grid, files.labels, files.split]
    return _run_stage(ctx, "train", None, inputs, config.section_hash("network", "train", "patch_size"), work)


def cmd_scan(ctx: RunContext) -> Dict[str, Any]:
    return _merge([_scan_city(ctx, city_id) for city_id in _city_ids(ctx.config)])


def _scan_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    files = CityArtifacts(config, city_id)
    run = RunArtifacts(config)

    def work():
        spec, params = load_model(run.model)
        grid = load_grid_csv(files.grid)
        if spec.patch_size != grid.patch_size:
            raise ConfigurationError(f"Model {run.model} expects {spec.patch_size}px patches, grid has {grid.patch_size}")
        panel = network_service.dense_scan(spec, params, grid, _catalog(config, city_id))
        save_score_panel(panel, files.stage1)
        return f"{city_id}: {len(grid.included)} patches x {len(panel.dates)} dates scanned", [files.stage1]

    inputs = [run.model, files.grid, files.inputs.rasters]
    return _run_stage(ctx, "scan", city_id, inputs, config.section_hash("patch_size"), work)


# ---------------------------------------------------------------- smooth and evaluate

def cmd_smooth(ctx: RunContext) -> Dict[str, Any]:
    """Stage two: one forest over the Train-split rows of every city, then smoothing of every panel"""
    config = ctx.config
    run = RunArtifacts(config)
    city_ids = _city_ids(config)
    params = config.forest

    def work():
        # 1. Training rows pooled over cities
        loaded, rows = {}, []
        for city_id in city_ids:
            files = CityArtifacts(config, city_id)
            grid = load_grid_csv(files.grid)
            panel = load_score_panel(files.stage1, grid)
            labels = load_label_panel(files.labels, grid, image_dates=panel.dates)
            split = load_split(files.split, config.split.seed, config.split.train_fraction)
            loaded[city_id] = (files, grid, panel)
            rows.append(smoother_service.training_rows(panel, grid, labels, split, params.include_leads))
        pooled = ForestRows(
            x=np.vstack([r.x for r in rows]),
            y=np.concatenate([r.y for r in rows]),
            keys=[k for r in rows for k in r.keys]
        )
        pooled = smoother_service.cap_rows(pooled, params.max_train_rows, params.bootstrap_seed)
        if len(pooled.y) == 0:
            raise InputError("No labeled Train-split rows for the forest")

        # 2. Forest and recall cutoff
        fit = smoother_service.train_forest(pooled.x, pooled.y, params)
        calibration = smoother_service.calibrate(fit, pooled.x, pooled.y, config.target_recall)
        save_forest(fit.model, calibration, run.forest)
        write_csv(_keys_frame(pooled.keys), run.forest_rows)

        # 3. Smoothed panels
        outputs = [run.forest, run.forest_rows]
        for city_id, (files, grid, panel) in loaded.items():
            save_score_panel(smoother_service.smooth_panel(panel, grid, fit.model, calibration), files.smoothed)
            outputs.append(files.smoothed)
        message = (
            f"Forest on {len(pooled.y)} rows, cutoff {calibration.threshold:.4f} "
            f"reaching train recall {calibration.achieved_train_recall:.4f}"
        )
        return message, outputs

    inputs = []
    for city_id in city_ids:
        files = CityArtifacts(config, city_id)
        inputs += [files.stage1, files.grid, files.labels, files.split]
    return _run_stage(ctx, "smooth", None, inputs, config.section_hash("forest", "target_recall"), work)


def cmd_evaluate(ctx: RunContext) -> Dict[str, Any]:
    return _merge([_evaluate_city(ctx, city_id) for city_id in _city_ids(ctx.config)])


def _evaluate_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    files = CityArtifacts(config, city_id)

    def work():
        grid = load_grid_csv(files.grid)
        panel = load_score_panel(files.scores(ctx.store), grid)
        labels = load_label_panel(files.labels, grid, image_dates=panel.dates)
        split = load_split(files.split, config.split.seed, config.split.train_fraction)
        report = evaluation_service.evaluate_run(panel, labels, split, grid)

        write_json(evaluation_payload(report), files.evaluation)
        outputs = [files.evaluation]
        for stage, curve in sorted(report.pr_curves.items(), key=lambda item: item[0].value):
            outputs.append(save_pr_curve(curve, files.curves / f"pr_{stage.value}.csv"))
            outputs.append(save_pr_curve(report.balanced_pr_curves[stage],
                                         files.curves / f"pr_balanced_{stage.value}.csv"))
        for stage, curve in sorted(report.roc_curves.items(), key=lambda item: item[0].value):
            outputs.append(save_roc_curve(curve, files.curves / f"roc_{stage.value}.csv"))
        if report.pr_curves:
            outputs.append(plot_pr_curves(report.pr_curves, f"{city_id}: test precision-recall", files.pr_plot))
        outputs.append(plot_score_map(panel, files.score_map))

        message = "; ".join(
            f"{r.stage.value} AUC {r.auc:.4f} AP {r.ap_unbalanced:.4f} AP(1:1) {r.ap_balanced:.4f}"
            for r in report.stages
        )
        return f"{city_id}: {message}", outputs

    inputs = [*files.score_inputs(ctx.store), files.labels, files.split, files.grid]
    return _run_stage(ctx, "evaluate", city_id, inputs, config.section_hash("split"), work)


# ---------------------------------------------------------------- event study

def cmd_eventstudy(ctx: RunContext) -> Dict[str, Any]:
    """Leads and lags of strike events against the score panel of every city with an event file"""
    cities = [city_id for city_id in _city_ids(ctx.config) if ctx.config.resolved_paths(city_id).events is not None]
    return _merge([_eventstudy_city(ctx, city_id) for city_id in cities], "No city has an event file")


def _eventstudy_city(ctx: RunContext, city_id: str) -> Dict[str, Any]:
    config = ctx.config
    settings = config.event_study
    files = CityArtifacts(config, city_id)

    def work():
        # 1. Outcome panel
        grid = load_grid_csv(files.grid)
        scores_path = files.scores(ctx.store)
        panel = load_score_panel(scores_path, grid)
        scores = panel.stage2 if settings.stage == Stage.STAGE2 else panel.stage1
        if scores is None:
            raise InputError(f"{scores_path} has no {settings.stage.value} scores (run the smooth stage first)")

        # 2. Events onto patches and image dates
        events = load_events(files.inputs.events)
        pre = _catalog(config, city_id).load_pre()
        mapping = event_study_service.map_events(events, grid, pre, panel.dates)

        # 3. Two-way fixed-effects regression
        ids = grid.sorted_ids()
        design = event_study_service.build_design(event_study_service.outcome_matrix(scores, ids), ids, mapping)
        result = event_study_service.estimate(design, settings.tol, settings.max_sweeps)

        save_coefficients(result, files.coefficients)
        plot_event_study(result, f"{city_id}: {settings.stage.value} score around strike events", files.event_plot)
        write_json({
            "events": mapping.n_events,
            "dropped": mapping.drops,
            "treated_patches": len(mapping.first_event),
            "observations": result.n_obs,
            "sweeps": result.sweeps,
        }, files.event_mapping)
        lags = [result.coefficients[b] for b in design.bins if b >= 0]
        message = f"{city_id}: {len(mapping.first_event)} treated patches, mean lag coefficient {np.mean(lags):.4f}"
        return message, [files.coefficients, files.event_plot, files.event_mapping]

    inputs = [*files.score_inputs(ctx.store), files.inputs.events, files.grid, files.inputs.rasters]
    return _run_stage(ctx, "eventstudy", city_id, inputs, config.section_hash("event_study"), work)


# ---------------------------------------------------------------- report

def cmd_report(ctx: RunContext) -> Dict[str, Any]:
    """Cross-city summary table plus the split-hygiene audit"""
    config = ctx.config
    run = RunArtifacts(config)
    city_ids = _city_ids(config)

    missing = []
    for city_id in city_ids:
        files = CityArtifacts(config, city_id)
        for stage, path in (("tile", files.grid), ("label", files.labels), ("split", files.split),
                            ("scan", files.stage1), ("evaluate", files.evaluation)):
            if not path.exists():
                missing.append(f"{city_id}: stage '{stage}' ({path})")
    if missing:
        raise StageError("report", InputError("Missing run artifacts: " + "; ".join(missing)))

    def work():
        rows, splits, outputs = [], {}, [run.summary, run.audit]
        for city_id in city_ids:
            files = CityArtifacts(config, city_id)
            grid = load_grid_csv(files.grid)
            panel = load_score_panel(files.scores(ctx.store), grid)
            labels = load_label_panel(files.labels, grid, image_dates=panel.dates)
            splits[city_id] = load_split(files.split, config.split.seed, config.split.train_fraction)
            rows.append(summary_row(city_id, grid, labels, panel, read_json(files.evaluation)))

            truth_path = files.inputs.truth
            if truth_path is not None and truth_path.exists():
                truth = load_label_panel(truth_path, grid, image_dates=panel.dates)
                write_json({
                    "share_destroyed_labels": label_service.label_summary(labels)["share_destroyed"],
                    "share_destroyed_truth": truth_share(truth, labels),
                }, files.truth_check)
                outputs.append(files.truth_check)

        write_csv(summary_frame(rows), run.summary)
        audit_inputs = {
            "cnn_samples": read_csv(run.train_samples, SAMPLE_KEY_COLUMNS) if run.train_samples.exists() else None,
            "forest_rows": read_csv(run.forest_rows, SAMPLE_KEY_COLUMNS) if run.forest_rows.exists() else None,
        }
        audit = audit_split_hygiene(splits, audit_inputs)
        write_json(audit, run.audit)
        status = "passed" if audit["passed"] else f"FAILED ({audit['violation_count']} violations)"
        return f"Summary of {len(city_ids)} cities written; split audit {status}", outputs

    inputs = []
    for city_id in city_ids:
        files = CityArtifacts(config, city_id)
        inputs += [files.grid, files.labels, files.split, *files.score_inputs(ctx.store), files.evaluation]
    inputs += [p for p in (run.train_samples, run.forest_rows) if p.exists()]
    return _run_stage(ctx, "report", None, inputs, config.section_hash("split"), work)


# ---------------------------------------------------------------- pipeline

def cmd_pipeline(ctx: RunContext) -> Dict[str, Any]:
    """synth (for synthetic cities) -> tile -> label -> split -> train -> scan -> smooth -> evaluate -> eventstudy -> report"""
    responses = []
    if any(city.synthetic for city in ctx.config.cities):
        responses.append(cmd_synth(ctx))
    for stage in PIPELINE_STAGES:
        responses.append(COMMANDS[stage](ctx))
    responses.append(cmd_eventstudy(ctx))
    responses.append(cmd_report(ctx))
    return _merge(responses)


COMMANDS: Dict[str, Callable[[RunContext], Dict[str, Any]]] = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "label": cmd_label,
    "split": cmd_split,
    "train": cmd_train,
    "scan": cmd_scan,
    "smooth": cmd_smooth,
    "evaluate": cmd_evaluate,
    "eventstudy": cmd_eventstudy,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def run_command(command: str, config: RunConfig, resume: bool = False) -> Dict[str, Any]:
    """Run one command under the output-directory lock"""
    if command not in COMMANDS:
        raise ConfigurationError(f"Unknown command {command}; choose from {sorted(COMMANDS)}")
    with RunArtifactStore(config.output_path, config.config_hash()) as store:
        return COMMANDS[command](RunContext(config=config, store=store, resume=resume))
