from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class CalibrationSource(str, Enum):
    OOB = "oob"
    IN_SAMPLE = "in_sample"


class ForestParams(BaseModel):
    """Random forest hyperparameters"""
    model_config = ConfigDict(extra="forbid")

    num_trees: int = Field(100, ge=1)
    max_depth: int = Field(12, ge=0)
    min_leaf: int = Field(5, ge=1)
    features_per_split: int = Field(4, ge=1)
    bootstrap: bool = Field(True, description="Fit each tree on a bootstrap resample")
    bootstrap_seed: int = Field(0, description="Per-tree seeds are derived from this seed and the tree index")
    include_leads: bool = Field(False, description="Append offsets +1/+2 to the lag features")
    calibrate_on: CalibrationSource = Field(
        CalibrationSource.IN_SAMPLE,
        description="Scores the cutoff is chosen on; recall is always reported on the in-sample stage-2 scores"
    )
    max_train_rows: Optional[int] = Field(None, ge=1, description="Seeded cap on forest training rows (None keeps all)")


class TreeArrays(BaseModel):
    """
    Flat node arrays of one fitted tree.

    Node i is a leaf when feature[i] == -1; otherwise rows with
    x[feature[i]] <= threshold[i] go to left[i], the rest to right[i].
    value[i] is the positive fraction of the training rows reaching node i.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @model_validator(mode="after")
    def validate_nodes(self):
        count = len(self.feature)
        for name in ("threshold", "left", "right", "value"):
            if len(getattr(self, name)) != count:
                raise ValueError(f"tree array {name} does not have {count} nodes")
        if np.any((self.value < 0) | (self.value > 1)):
            raise ValueError("leaf values must lie in [0, 1]")
        return self

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=int)
        for node in range(self.node_count):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max()) if self.node_count else 0


class RandomForestModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: ForestParams
    n_features: int = Field(..., ge=1)
    trees: List[TreeArrays] = Field(..., min_length=1)

    @property
    def num_trees(self) -> int:
        return len(self.trees)


class CutoffCalibration(BaseModel):
    model_config = ConfigDict(frozen=True)

    threshold: float = Field(..., ge=0, le=1)
    achieved_train_recall: float = Field(..., ge=0, le=1)
    target_recall: float = Field(0.5, gt=0, le=1)
    n_positives: int = Field(..., ge=1)
