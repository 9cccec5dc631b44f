import hashlib
import json
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class FCActivation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"


class NetworkSpec(BaseModel):
    """
    Architecture of the stage-one classifier.

    Each conv block is convolution (same padding, stride 1), ReLU, max-pooling with
    window = stride = pool_stride, then dropout. Block b has conv_filters * 2**b filters.
    The head is flatten, FC1, batch-norm, activation, FC2, activation, one output unit
    and a sigmoid.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_conv_blocks: int = Field(3, ge=0)
    kernel_size: int = Field(3, ge=1)
    pool_stride: int = Field(2, ge=1)
    dropout_prob: float = Field(0.1, ge=0, lt=1)
    fc_units: int = Field(64, ge=1)
    fc_activation: FCActivation = Field(FCActivation.RELU)
    input_channels: int = Field(6, ge=1)
    conv_filters: int = Field(8, ge=1, description="Filters of the first block, doubled per block")
    patch_size: int = Field(64, ge=1)

    @model_validator(mode="after")
    def validate_spatial_size(self):
        if self.feature_sides()[-1] < 1:
            raise ValueError(
                f"{self.num_conv_blocks} blocks with pool stride {self.pool_stride} shrink a "
                f"{self.patch_size}px patch below one pixel"
            )
        return self

    def feature_sides(self) -> List[int]:
        """Feature-map side length before the first block and after each block"""
        sides = [self.patch_size]
        for _ in range(self.num_conv_blocks):
            sides.append(sides[-1] // self.pool_stride)
        return sides

    def block_filters(self) -> List[int]:
        return [self.conv_filters * 2 ** block for block in range(self.num_conv_blocks)]

    @property
    def flat_size(self) -> int:
        channels = self.block_filters()[-1] if self.num_conv_blocks else self.input_channels
        return channels * self.feature_sides()[-1] ** 2

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Trainable parameters and batch-norm buffers, in model-file order"""
        shapes = []
        channels = self.input_channels
        for block, filters in enumerate(self.block_filters()):
            shapes.append((f"conv{block}.weight", (filters, channels, self.kernel_size, self.kernel_size)))
            shapes.append((f"conv{block}.bias", (filters,)))
            channels = filters
        shapes += [
            ("fc1.weight", (self.flat_size, self.fc_units)),
            ("fc1.bias", (self.fc_units,)),
            ("bn.gamma", (self.fc_units,)),
            ("bn.beta", (self.fc_units,)),
            ("fc2.weight", (self.fc_units, self.fc_units)),
            ("fc2.bias", (self.fc_units,)),
            ("out.weight", (self.fc_units,)),
            ("out.bias", (1,)),
            ("bn.running_mean", (self.fc_units,)),
            ("bn.running_var", (self.fc_units,)),
        ]
        return shapes

    def trainable_names(self) -> List[str]:
        return [name for name, _ in self.parameter_shapes() if not name.startswith("bn.running")]

    def parameter_count(self) -> int:
        return int(sum(np.prod(shape) for name, shape in self.parameter_shapes()
                       if not name.startswith("bn.running")))

    def spec_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class NetworkParams(BaseModel):
    """Named parameter arrays of a NetworkSpec, including batch-norm running statistics"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(values={name: array.copy() for name, array in self.values.items()})

    def check(self, spec: NetworkSpec) -> None:
        from src.exceptions import ShapeError

        for name, shape in spec.parameter_shapes():
            if name not in self.values:
                raise ShapeError(f"Missing parameter {name}")
            if self.values[name].shape != shape:
                raise ShapeError(f"Parameter {name} has shape {self.values[name].shape}, expected {shape}")
        if np.any(self.values["bn.running_var"] <= 0):
            raise ShapeError("Batch-norm running variance must be positive")


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(0.05, gt=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(8, ge=0)
    seed: int = 0
    weight_init_scale: float = Field(1.0, gt=0)
    momentum: float = Field(0.0, ge=0, lt=1, description="0 gives plain SGD")
    validation_fraction: float = Field(0.2, ge=0, lt=1, description="Share of Train-split patches held out")
    max_train_samples: Optional[int] = Field(4000, ge=2, description="Cap on the in-memory training pool")
    max_validation_samples: Optional[int] = Field(2000, ge=1)
    bn_momentum: float = Field(0.9, ge=0, lt=1)
    bn_eps: float = Field(1e-5, gt=0)


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    val_auc: float


class TrainingHistory(BaseModel):
    records: List[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def best_val_auc(self) -> float:
        if self.best_epoch is None:
            return float("nan")
        return self.records[self.best_epoch - 1].val_auc


class SearchCandidate(BaseModel):
    spec: NetworkSpec
    config: TrainConfig
    val_auc: float
    parameter_count: int


class SearchResult(BaseModel):
    candidates: List[SearchCandidate]
    best_index: int

    @property
    def best(self) -> SearchCandidate:
        return self.candidates[self.best_index]


DEFAULT_SEARCH_GRID: Dict[str, list] = {
    "num_conv_blocks": [2, 3, 4],
    "kernel_size": [3, 5],
    "pool_stride": [2],
    "dropout_prob": [0.1, 0.3, 0.5],
    "fc_units": [64, 128],
    "fc_activation": [FCActivation.RELU, FCActivation.SIGMOID],
}
