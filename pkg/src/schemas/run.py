import hashlib
import json
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.exceptions import ConfigurationError
from src.schemas.evaluation import Stage
from src.schemas.forest import ForestParams
from src.schemas.labels import AnnotationBinding
from src.schemas.network import NetworkSpec, TrainConfig
from src.schemas.synth import RenderSpec


class CityConfig(BaseModel):
    """One city: either rendered by the synth command or read from existing files"""
    model_config = ConfigDict(extra="forbid")

    city_id: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_\-]+$")
    synthetic: bool = Field(False, description="Inputs are produced by the synth command")
    rasters: Optional[str] = Field(None, description="Directory of PNG+JSON rasters")
    aoi: Optional[str] = Field(None, description="AOI JSON file")
    annotations: Optional[str] = Field(None, description="Annotation CSV, or a directory of per-date CSVs")
    annotation_dates: Optional[List[str]] = Field(None, description="Declared annotation dates (ISO)")
    events: Optional[str] = Field(None, description="Event CSV for the event study")

    @model_validator(mode="after")
    def validate_sources(self):
        if not self.synthetic:
            for name in ("rasters", "aoi", "annotations"):
                if getattr(self, name) is None:
                    raise ValueError(f"city {self.city_id}: '{name}' is required unless synthetic is true")
        return self


class SplitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    train_fraction: float = Field(0.7, gt=0, lt=1)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spec: NetworkSpec = Field(default_factory=NetworkSpec)
    search_grid: Optional[Dict[str, list]] = Field(
        None, description="Grid over NetworkSpec fields; the fixed spec is used when absent"
    )


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    extent: int = Field(6400, ge=64)
    building_density: float = Field(0.6, gt=0, le=1)
    destruction_share: float = Field(0.03, ge=0, le=1)
    seed: int = 7
    clustered: bool = True
    no_analysis_zone: bool = True
    render: RenderSpec = Field(default_factory=RenderSpec)
    event_share: float = Field(0.5, ge=0, le=1, description="Share of destroyed buildings with a strike event")
    event_decoys: int = Field(10, ge=0)


class EventStudyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage: Stage = Stage.STAGE2
    tol: float = Field(1e-10, gt=0)
    max_sweeps: int = Field(10000, ge=1)


class CityPaths(NamedTuple):
    rasters: Path
    aoi: Path
    annotations: Path
    events: Optional[Path]
    truth: Optional[Path]


class RunConfig(BaseModel):
    """A full run read from YAML; unknown keys anywhere are errors"""
    model_config = ConfigDict(extra="forbid")

    output_dir: str = "runs/default"
    patch_size: int = Field(64, ge=1)
    cities: List[CityConfig] = Field(default_factory=lambda: [CityConfig(city_id="synth", synthetic=True)])
    split: SplitConfig = Field(default_factory=SplitConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    forest: ForestParams = Field(default_factory=ForestParams)
    target_recall: float = Field(0.5, gt=0, le=1)
    annotation_binding: AnnotationBinding = AnnotationBinding.EXACT
    synth: SynthConfig = Field(default_factory=SynthConfig)
    event_study: EventStudyConfig = Field(default_factory=EventStudyConfig)

    @model_validator(mode="after")
    def validate_cities(self):
        ids = [city.city_id for city in self.cities]
        if not ids:
            raise ValueError("at least one city is required")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate city ids in {ids}")
        if self.network.spec.patch_size != self.patch_size:
            raise ValueError(
                f"network.spec.patch_size {self.network.spec.patch_size} differs from patch_size {self.patch_size}"
            )
        return self

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        if not Path(path).exists():
            raise ConfigurationError(f"Config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            payload = yaml.safe_load(f) or {}
        if not isinstance(payload, dict):
            raise ConfigurationError(f"{path} must hold a mapping at the top level")
        try:
            return cls(**payload)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid config {path}: {e}")

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def with_seed_override(self, seed: int) -> "RunConfig":
        """
        Every seed of the run replaced by its own value drawn from `seed`. The split, train,
        forest and synth seeds differ from each other, and the same `seed` always yields the same four.
        """
        if seed < 0:
            raise ConfigurationError(f"Seed override must be non-negative, got {seed}")
        split, train, forest, synth = (int(s) for s in np.random.SeedSequence(seed).generate_state(4))
        return self.model_copy(update={
            "split": self.split.model_copy(update={"seed": split}),
            "train": self.train.model_copy(update={"seed": train}),
            "forest": self.forest.model_copy(update={"bootstrap_seed": forest}),
            "synth": self.synth.model_copy(update={"seed": synth}),
        })

    def city_seed(self, city_id: str) -> int:
        index = [city.city_id for city in self.cities].index(city_id)
        return self.synth.seed + 1000 * index

    def city(self, city_id: str) -> CityConfig:
        for city in self.cities:
            if city.city_id == city_id:
                return city
        raise ConfigurationError(f"Unknown city {city_id}")

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def city_dir(self, city_id: str) -> Path:
        return self.output_path / "cities" / city_id

    def resolved_paths(self, city_id: str) -> CityPaths:
        city = self.city(city_id)
        if city.synthetic:
            base = self.city_dir(city_id) / "input"
            return CityPaths(
                rasters=base / "rasters",
                aoi=base / "aoi.json",
                annotations=base / "annotations",
                events=base / "events.csv",
                truth=base / "truth_labels.csv"
            )
        return CityPaths(
            rasters=Path(city.rasters),
            aoi=Path(city.aoi),
            annotations=Path(city.annotations),
            events=Path(city.events) if city.events else None,
            truth=None
        )

    def validate_paths(self, city_id: str) -> None:
        """Inputs of a city exist; synthetic inputs must have been rendered first"""
        paths = self.resolved_paths(city_id)
        hint = " (run the synth command first)" if self.city(city_id).synthetic else ""
        for name, path in (("rasters", paths.rasters), ("aoi", paths.aoi), ("annotations", paths.annotations)):
            if not path.exists():
                raise ConfigurationError(f"City {city_id}: {name} path {path} does not exist{hint}")

    def section_hash(self, *sections: str) -> str:
        """Hash of the config sections one stage depends on"""
        payload = json.dumps(self.model_dump(mode="json", include=set(sections)), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
