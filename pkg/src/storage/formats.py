"""
On-disk formats of every artifact the pipeline reads or writes.

CSV goes through pandas with a fixed float format and line terminator, JSON is
written with sorted keys, so reruns produce byte-identical files.
"""
import json
import math
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from src.exceptions import ConfigurationError, DimensionError, InputError, ShapeError
from src.logging.logger import get_logger
from src.schemas.events import EventRecord, RegressionResult
from src.schemas.evaluation import EvaluationReport, PRCurve, ROCCurve
from src.schemas.forest import CutoffCalibration, ForestParams, RandomForestModel, TreeArrays
from src.schemas.labels import (
    Annotation,
    DamageClass,
    LabelClass,
    LabelPanel,
    SplitAssignment,
    SplitName,
)
from src.schemas.network import NetworkParams, NetworkSpec, TrainingHistory
from src.schemas.raster import AreaOfInterest, GeoRaster, GeoReference, PatchGrid, RasterCatalog, RasterEntry
from src.schemas.scores import ScorePanel

logger = get_logger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.10g"
MODEL_FORMAT = "damage-monitor/convnet"
FOREST_FORMAT = "damage-monitor/forest"
FORMAT_VERSION = 1

GRID_COLUMNS = ["city_id", "patch_size", "row", "col", "included", "no_analysis"]
ANNOTATION_COLUMNS = ["lon", "lat", "date", "damage_class"]
EVENT_COLUMNS = ["lon", "lat", "date", "event_type"]
LABEL_COLUMNS = ["city_id", "row", "col", "date", "label"]
SPLIT_COLUMNS = ["row", "col", "split"]
SCORE_COLUMNS = ["city_id", "row", "col", "date", "stage1", "stage2", "binary"]


# ---------------------------------------------------------------- primitives

def write_json(payload: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, sort_keys=True, indent=2, allow_nan=False)
        f.write("\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}")


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: PathLike, columns: Sequence[str], allow_empty: bool = True) -> pd.DataFrame:
    """Read a CSV and check its header; missing files and columns name the file"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        frame = pd.read_csv(path, keep_default_na=True)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=list(columns))
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"{path} lacks columns {missing}")
    if not allow_empty and frame.empty:
        raise InputError(f"{path} holds no rows")
    return frame


def finite_or_none(value: float) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else float(value)


def _parse_date(value) -> date:
    return date.fromisoformat(str(value)[:10])


# ---------------------------------------------------------------- rasters and AOIs

def save_raster(raster: GeoRaster, png_path: PathLike) -> Tuple[Path, Path]:
    """PNG pixels plus a JSON sidecar with the georeference and capture date"""
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    sidecar_path = png_path.with_suffix(".json")
    Image.fromarray(np.ascontiguousarray(raster.pixels)).save(png_path, format="PNG")
    write_json({
        "city_id": raster.city_id,
        "capture_date": raster.capture_date.isoformat(),
        "width": raster.width,
        "height": raster.height,
        "channels": raster.channels,
        "geo": raster.geo.model_dump(),
        "transform": list(raster.transform)[:6],
    }, sidecar_path)
    return png_path, sidecar_path


def load_raster(png_path: PathLike, sidecar_path: PathLike) -> GeoRaster:
    sidecar = read_json(sidecar_path)
    if not Path(png_path).exists():
        raise InputError(f"File not found: {png_path}")
    with Image.open(png_path) as image:
        pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
    if pixels.shape[:2] != (sidecar["height"], sidecar["width"]):
        raise DimensionError(
            f"{png_path} is {pixels.shape[1]}x{pixels.shape[0]}, sidecar says {sidecar['width']}x{sidecar['height']}"
        )
    return GeoRaster(
        width=sidecar["width"],
        height=sidecar["height"],
        pixels=np.ascontiguousarray(pixels),
        geo=GeoReference(**sidecar["geo"]),
        capture_date=_parse_date(sidecar["capture_date"]),
        city_id=sidecar["city_id"]
    )


def discover_rasters(directory: PathLike, city_id: Optional[str] = None) -> RasterCatalog:
    """Catalog every PNG with a sidecar in a directory, sorted by capture date"""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"Raster directory not found: {directory}")
    entries, found_city, reference = [], None, None
    for sidecar in sorted(directory.glob("*.json")):
        png = sidecar.with_suffix(".png")
        if not png.exists():
            continue
        meta = read_json(sidecar)
        found_city = found_city or meta["city_id"]
        if meta["city_id"] != found_city:
            raise DimensionError(f"{directory} mixes rasters of {found_city} and {meta['city_id']}")
        footprint = (meta["width"], meta["height"], GeoReference(**meta["geo"]))
        reference = reference or footprint
        if footprint != reference:
            raise DimensionError(f"{sidecar} is not co-registered with the other rasters in {directory}")
        entries.append(RasterEntry(
            capture_date=_parse_date(meta["capture_date"]),
            png_path=str(png),
            sidecar_path=str(sidecar)
        ))
    if not entries:
        raise InputError(f"No PNG+JSON rasters in {directory}")
    entries.sort(key=lambda entry: entry.capture_date)
    return RasterCatalog(city_id=city_id or found_city, entries=entries)


def save_aoi(aois: Sequence[AreaOfInterest], path: PathLike) -> Path:
    return write_json([aoi.model_dump(mode="json") for aoi in aois], path)


def load_aoi(path: PathLike) -> List[AreaOfInterest]:
    """A JSON list of {kind, rings} objects, or a single object"""
    payload = read_json(path)
    if isinstance(payload, dict):
        payload = [payload]
    try:
        return [AreaOfInterest(**item) for item in payload]
    except ValueError as e:
        raise ConfigurationError(f"Invalid AOI in {path}: {e}")


# ---------------------------------------------------------------- grid

def export_grid_csv(grid: PatchGrid, path: PathLike) -> Path:
    """Every window of the tiling, included or not"""
    rows, cols = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    frame = pd.DataFrame({
        "city_id": grid.city_id,
        "patch_size": grid.patch_size,
        "row": rows.ravel(),
        "col": cols.ravel(),
        "included": grid.included_mask().ravel().astype(int),
        "no_analysis": grid.no_analysis_mask().ravel().astype(int),
    })
    return write_csv(frame, path)


def load_grid_csv(path: PathLike) -> PatchGrid:
    frame = read_csv(path, GRID_COLUMNS, allow_empty=False)
    included = frame[frame["included"] == 1]
    zone = frame[frame["no_analysis"] == 1]
    return PatchGrid(
        city_id=str(frame["city_id"].iloc[0]),
        patch_size=int(frame["patch_size"].iloc[0]),
        rows=int(frame["row"].max()) + 1,
        cols=int(frame["col"].max()) + 1,
        included=frozenset(zip(included["row"].astype(int), included["col"].astype(int))),
        no_analysis=frozenset(zip(zone["row"].astype(int), zone["col"].astype(int)))
    )


# ---------------------------------------------------------------- annotations and events

def save_annotations(annotations: Sequence[Annotation], path: PathLike) -> Path:
    frame = pd.DataFrame(
        [(a.lonlat[0], a.lonlat[1], a.date.isoformat(), a.damage_class.value) for a in annotations],
        columns=ANNOTATION_COLUMNS
    )
    return write_csv(frame, path)


def load_annotations(path: PathLike) -> List[Annotation]:
    frame = read_csv(path, ANNOTATION_COLUMNS)
    try:
        return [
            Annotation(lonlat=(float(r.lon), float(r.lat)), date=_parse_date(r.date),
                       damage_class=DamageClass(r.damage_class))
            for r in frame.itertuples(index=False)
        ]
    except ValueError as e:
        raise InputError(f"Invalid annotation in {path}: {e}")


def annotation_file_name(when: date) -> str:
    return f"annotations_{when.isoformat()}.csv"


def load_annotation_source(path: PathLike) -> Tuple[List[Annotation], Optional[List[date]]]:
    """
    One annotation CSV, or a directory of per-date files named annotations_<ISO date>.csv.

    A directory also declares its annotation dates, empty files included.
    """
    path = Path(path)
    if not path.is_dir():
        return load_annotations(path), None
    annotations, dates = [], []
    for file in sorted(path.glob("annotations_*.csv")):
        try:
            when = date.fromisoformat(file.stem.rsplit("_", 1)[-1])
        except ValueError:
            raise InputError(f"Cannot read an annotation date from the file name {file}")
        dates.append(when)
        annotations += load_annotations(file)
    if not dates:
        raise InputError(f"No annotations_<date>.csv files in {path}")
    return annotations, dates


def save_events(events: Sequence[EventRecord], path: PathLike) -> Path:
    frame = pd.DataFrame(
        [(e.lonlat[0], e.lonlat[1], e.date.isoformat(), e.event_type) for e in events],
        columns=EVENT_COLUMNS
    )
    return write_csv(frame, path)


def load_events(path: PathLike) -> List[EventRecord]:
    frame = read_csv(path, EVENT_COLUMNS, allow_empty=False)
    return [
        EventRecord(lonlat=(float(r.lon), float(r.lat)), date=_parse_date(r.date), event_type=str(r.event_type))
        for r in frame.itertuples(index=False)
    ]


# ---------------------------------------------------------------- labels and split

def save_label_panel(panel: LabelPanel, path: PathLike) -> Path:
    rows, cols = np.nonzero(panel.mask)
    names = {code.value: code.export_name for code in LabelClass}
    records = [
        (panel.city_id, int(r), int(c), when.isoformat(), names[int(panel.codes[t, r, c])])
        for t, when in enumerate(panel.image_dates)
        for r, c in zip(rows, cols)
    ]
    return write_csv(pd.DataFrame(records, columns=LABEL_COLUMNS), path)


def load_label_panel(
    path: PathLike,
    grid: PatchGrid,
    image_dates: Optional[Sequence[date]] = None,
    annotation_dates: Sequence[date] = ()
) -> LabelPanel:
    frame = read_csv(path, LABEL_COLUMNS)
    codes_by_name = {code.export_name: code.value for code in LabelClass}
    dates = list(image_dates) if image_dates is not None else sorted({_parse_date(d) for d in frame["date"]})
    index_of = {d: t for t, d in enumerate(dates)}
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    codes = np.full((len(dates), grid.rows, grid.cols), LabelClass.UNKNOWN, dtype=np.int8)
    for r in frame.itertuples(index=False):
        mask[r.row, r.col] = True
        codes[index_of[_parse_date(r.date)], r.row, r.col] = codes_by_name[r.label]
    return LabelPanel(
        city_id=grid.city_id,
        image_dates=dates,
        annotation_dates=list(annotation_dates),
        codes=codes,
        mask=mask
    )


def save_split(split: SplitAssignment, path: PathLike) -> Path:
    records = [(r, c, name.value) for (r, c), name in sorted(split.assignment.items())]
    return write_csv(pd.DataFrame(records, columns=SPLIT_COLUMNS), path)


def load_split(path: PathLike, seed: int, train_fraction: float) -> SplitAssignment:
    frame = read_csv(path, SPLIT_COLUMNS)
    assignment = {(int(r.row), int(r.col)): SplitName(r.split) for r in frame.itertuples(index=False)}
    return SplitAssignment(assignment=assignment, train_fraction=train_fraction, seed=seed)


# ---------------------------------------------------------------- score panels

def save_score_panel(panel: ScorePanel, path: PathLike) -> Path:
    rows, cols = np.nonzero(panel.mask)
    n = len(rows)
    frames = []
    for t, when in enumerate(panel.dates):
        frames.append(pd.DataFrame({
            "city_id": [panel.city_id] * n,
            "row": rows,
            "col": cols,
            "date": [when.isoformat()] * n,
            "stage1": panel.stage1[t, rows, cols],
            "stage2": panel.stage2[t, rows, cols] if panel.stage2 is not None else np.full(n, np.nan),
            "binary": (panel.binary[t, rows, cols].astype(float) if panel.binary is not None
                       else np.full(n, np.nan)),
        }))
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SCORE_COLUMNS)
    # unsmoothed panels leave stage2 and binary empty; smoothed binary calls are written as 0/1
    frame["binary"] = frame["binary"].astype("Int64")
    return write_csv(frame, path)


def load_score_panel(path: PathLike, grid: PatchGrid) -> ScorePanel:
    frame = read_csv(path, SCORE_COLUMNS, allow_empty=False)
    dates = sorted({_parse_date(d) for d in frame["date"]})
    index_of = {d: t for t, d in enumerate(dates)}
    t = np.array([index_of[_parse_date(d)] for d in frame["date"]])
    r, c = frame["row"].to_numpy(dtype=int), frame["col"].to_numpy(dtype=int)

    shape = (len(dates), grid.rows, grid.cols)
    stage1 = np.full(shape, np.nan)
    stage1[t, r, c] = frame["stage1"].to_numpy(dtype=float)
    stage2 = binary = None
    if frame["stage2"].notna().any():
        stage2 = np.full(shape, np.nan)
        stage2[t, r, c] = frame["stage2"].to_numpy(dtype=float)
        binary = np.zeros(shape, dtype=np.int8)
        binary[t, r, c] = frame["binary"].fillna(0).to_numpy(dtype=np.int8)
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    mask[r, c] = True
    return ScorePanel(city_id=grid.city_id, dates=dates, mask=mask, stage1=stage1, stage2=stage2, binary=binary)


# ---------------------------------------------------------------- network

def save_model(spec: NetworkSpec, params: NetworkParams, path: PathLike) -> Path:
    params.check(spec)
    return write_json({
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "spec_hash": spec.spec_hash(),
        "spec": spec.model_dump(mode="json"),
        "parameters": [
            {"name": name, "shape": list(shape), "values": params[name].ravel().tolist()}
            for name, shape in spec.parameter_shapes()
        ],
    }, path)


def load_model(path: PathLike) -> Tuple[NetworkSpec, NetworkParams]:
    payload = read_json(path)
    if payload.get("format") != MODEL_FORMAT or payload.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path} is not a version {FORMAT_VERSION} {MODEL_FORMAT} file")
    spec = NetworkSpec(**payload["spec"])
    if spec.spec_hash() != payload["spec_hash"]:
        raise ShapeError(f"{path}: spec hash {payload['spec_hash']} does not match its spec")
    values = {
        item["name"]: np.asarray(item["values"], dtype=np.float64).reshape(item["shape"])
        for item in payload["parameters"]
    }
    params = NetworkParams(values=values)
    params.check(spec)
    return spec, params


def save_history(history: TrainingHistory, path: PathLike) -> Path:
    frame = pd.DataFrame([r.model_dump() for r in history.records], columns=["epoch", "loss", "val_auc"])
    return write_csv(frame, path)


# ---------------------------------------------------------------- forest

def save_forest(model: RandomForestModel, calibration: CutoffCalibration, path: PathLike) -> Path:
    return write_json({
        "format": FOREST_FORMAT,
        "version": FORMAT_VERSION,
        "params": model.params.model_dump(mode="json"),
        "n_features": model.n_features,
        "calibration": calibration.model_dump(),
        "trees": [
            {
                "feature": tree.feature.tolist(),
                "threshold": tree.threshold.tolist(),
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "value": tree.value.tolist(),
            }
            for tree in model.trees
        ],
    }, path)


def load_forest(path: PathLike) -> Tuple[RandomForestModel, CutoffCalibration]:
    payload = read_json(path)
    if payload.get("format") != FOREST_FORMAT or payload.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path} is not a version {FORMAT_VERSION} {FOREST_FORMAT} file")
    trees = [
        TreeArrays(
            feature=np.asarray(t["feature"], dtype=np.int64),
            threshold=np.asarray(t["threshold"], dtype=np.float64),
            left=np.asarray(t["left"], dtype=np.int64),
            right=np.asarray(t["right"], dtype=np.int64),
            value=np.asarray(t["value"], dtype=np.float64),
        )
        for t in payload["trees"]
    ]
    model = RandomForestModel(params=ForestParams(**payload["params"]), n_features=payload["n_features"], trees=trees)
    return model, CutoffCalibration(**payload["calibration"])


# ---------------------------------------------------------------- evaluation and event study

def save_pr_curve(curve: PRCurve, path: PathLike) -> Path:
    frame = pd.DataFrame({"threshold": curve.thresholds, "recall": curve.recall, "precision": curve.precision})
    return write_csv(frame, path)


def save_roc_curve(curve: ROCCurve, path: PathLike) -> Path:
    return write_csv(pd.DataFrame({"threshold": curve.thresholds, "fpr": curve.fpr, "tpr": curve.tpr}), path)


def evaluation_payload(report: EvaluationReport) -> Dict[str, Any]:
    """Evaluation JSON: undefined metrics become null"""
    stages = []
    for stage in report.stages:
        row = stage.model_dump(mode="json")
        for key in ("auc", "ap_unbalanced", "ap_balanced", "prevalence"):
            row[key] = finite_or_none(row[key])
        stages.append(row)
    payload = {"city": report.city, "stages": stages}
    if report.no_analysis is not None:
        payload["no_analysis"] = {k: finite_or_none(v) for k, v in report.no_analysis.items()}
    return payload


def save_coefficients(result: RegressionResult, path: PathLike) -> Path:
    items = sorted(result.coefficients.items())
    return write_csv(pd.DataFrame(items, columns=["bin", "coefficient"]), path)

