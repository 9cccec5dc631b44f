"""
Run summary and split-hygiene audit.

The summary has one row per city with the columns of the cross-city performance
table (samples, dates, labeled samples, share destroyed, AUC, AP 1:1, AP unbalanced,
binary destruction count at the final date) plus a total/average row.
"""
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from src.logging.logger import get_logger
from src.schemas.labels import LabelClass, LabelPanel, SplitAssignment, SplitName
from src.schemas.raster import PatchGrid
from src.schemas.scores import ScorePanel
from src.services.label_service import label_service

logger = get_logger(__name__)

SUMMARY_COLUMNS = [
    "city",
    "total_samples",
    "dates",
    "labeled_samples",
    "share_destroyed",
    "auc",
    "ap_balanced",
    "ap_unbalanced",
    "destruction_binary",
]
TOTAL_ROW = "total/average"


def _headline_stage(evaluation: Dict[str, Any]) -> Dict[str, Any]:
    """Stage-2 metrics when the run was smoothed, stage-1 otherwise"""
    stages = {row["stage"]: row for row in evaluation.get("stages", [])}
    return stages.get("stage2") or stages.get("stage1") or {}


def _metric(row: Dict[str, Any], key: str) -> float:
    value = row.get(key)
    return float("nan") if value is None else float(value)


def summary_row(
    city_id: str,
    grid: PatchGrid,
    labels: LabelPanel,
    panel: ScorePanel,
    evaluation: Dict[str, Any]
) -> Dict[str, Any]:
    counts = label_service.label_summary(labels)
    headline = _headline_stage(evaluation)
    binary = int(panel.binary[-1].sum()) if panel.binary is not None else None
    return {
        "city": city_id,
        "total_samples": len(grid.included) * len(panel.dates),
        "dates": len(panel.dates),
        "labeled_samples": int(counts["labeled_samples"]),
        "share_destroyed": float(counts["share_destroyed"]),
        "auc": _metric(headline, "auc"),
        "ap_balanced": _metric(headline, "ap_balanced"),
        "ap_unbalanced": _metric(headline, "ap_unbalanced"),
        "destruction_binary": binary,
    }


def summary_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """City rows followed by the total/average row"""
    frame = pd.DataFrame(list(rows), columns=SUMMARY_COLUMNS)
    labeled = frame["labeled_samples"].sum()
    destroyed = (frame["labeled_samples"] * frame["share_destroyed"]).sum()
    total = {
        "city": TOTAL_ROW,
        "total_samples": int(frame["total_samples"].sum()),
        "dates": None,
        "labeled_samples": int(labeled),
        "share_destroyed": float(destroyed / labeled) if labeled else 0.0,
        "auc": float(frame["auc"].mean()),
        "ap_balanced": float(frame["ap_balanced"].mean()),
        "ap_unbalanced": float(frame["ap_unbalanced"].mean()),
        "destruction_binary": None,
    }
    frame = pd.concat([frame, pd.DataFrame([total], columns=SUMMARY_COLUMNS)], ignore_index=True)
    for column in ("dates", "destruction_binary"):
        frame[column] = frame[column].astype("Int64")
    return frame


def audit_split_hygiene(
    splits: Dict[str, SplitAssignment],
    inputs: Dict[str, Optional[pd.DataFrame]]
) -> Dict[str, Any]:
    """
    Check that no Test-split patch reaches a training or calibration input.

    `inputs` maps an input name to a frame with city_id, row and col columns
    (the CNN training/validation samples, the forest training rows).
    """
    test_ids = {
        city_id: set(split.ids(SplitName.TEST))
        for city_id, split in splits.items()
    }
    checked, violations = {}, []
    for name, frame in sorted(inputs.items()):
        if frame is None:
            checked[name] = None
            continue
        checked[name] = int(len(frame))
        for city_id, row, col in frame[["city_id", "row", "col"]].drop_duplicates().itertuples(index=False):
            if (int(row), int(col)) in test_ids.get(city_id, set()):
                violations.append({"input": name, "city_id": city_id, "row": int(row), "col": int(col)})

    passed = not violations
    if passed:
        logger.info(f"Split audit passed over {sum(v or 0 for v in checked.values())} training/calibration rows")
    else:
        logger.error(f"Split audit found {len(violations)} Test-split patches in training inputs")
    return {
        "passed": passed,
        "checked_rows": checked,
        "test_patches": {city_id: len(ids) for city_id, ids in sorted(test_ids.items())},
        "violations": violations[:100],
        "violation_count": len(violations),
    }


def truth_share(truth: LabelPanel, labels: LabelPanel) -> float:
    """Share of truly destroyed cells among the cells the propagated labels know"""
    known = (labels.codes != LabelClass.UNKNOWN) & labels.mask[None]
    if truth.codes.shape != labels.codes.shape or not known.any():
        return 0.0
    return float(np.mean(truth.codes[known] == LabelClass.DESTROYED))
