from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class ScoredLabelSet(BaseModel):
    """Paired scores and binary labels"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scores: np.ndarray
    labels: np.ndarray

    @model_validator(mode="after")
    def validate_pairs(self):
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-d arrays of equal length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        return self

    @classmethod
    def from_arrays(cls, scores, labels) -> "ScoredLabelSet":
        return cls(scores=np.asarray(scores, dtype=np.float64), labels=np.asarray(labels, dtype=np.int8))

    @property
    def positives(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def negatives(self) -> int:
        return int(np.sum(self.labels == 0))

    def __len__(self) -> int:
        return len(self.scores)


class PRCurve(BaseModel):
    """Precision/recall at every distinct score threshold, swept from high to low"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    average_precision: float = Field(..., ge=0, le=1)


class ROCCurve(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


class ConfusionCounts(BaseModel):
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    balanced_precision: float


class StageReport(BaseModel):
    """One row of the evaluation JSON"""
    city: str
    stage: Stage
    auc: float
    ap_unbalanced: float
    ap_balanced: float
    n_test: int
    prevalence: float


class EvaluationReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    city: str
    stages: List[StageReport]
    pr_curves: Dict[Stage, PRCurve] = Field(default_factory=dict)
    balanced_pr_curves: Dict[Stage, PRCurve] = Field(default_factory=dict)
    roc_curves: Dict[Stage, ROCCurve] = Field(default_factory=dict)
    no_analysis: Optional[Dict[str, float]] = None

    def stage(self, stage: Stage) -> Optional[StageReport]:
        for report in self.stages:
            if report.stage == stage:
                return report
        return None
