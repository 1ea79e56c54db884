"""Pipeline configuration: a YAML file validated against a pydantic schema.

Unknown keys are rejected and every error names the path of the offending
field (``train.pretrain.lr0: Input should be greater than 0``). Every
field has a default, so an empty file is the full-scale configuration;
``load_preset("desk")`` gives the small synthetic setup used by the
acceptance tests.
"""

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import DatasetSpec
from .errors import NASError
from .evolution import EvoConfig
from .heads import HeadSpec, classification_head, segmentation_head
from .space import DEFAULT_EXPANSIONS, SearchSpace, StageSpec, constraint_preset, desk_space, full_space
from .train import TrainConfig


class ConfigError(NASError, ValueError):
    """Config file missing, unparsable or not matching the schema."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StageModel(_Model):
    num_layers: int = Field(gt=0)
    out_channels: int = Field(gt=0)
    stride: Literal[1, 2]
    activation: Literal["relu", "swish"] = "swish"


class SpaceModel(_Model):
    preset: Literal["desk", "full", "custom"] = "desk"
    stages: Optional[list[StageModel]] = None
    input_resolution: Optional[int] = Field(default=None, gt=0)
    stem_channels: Optional[int] = Field(default=None, gt=0)
    first_block_channels: Optional[int] = Field(default=None, gt=0)
    head_channels: Optional[int] = Field(default=None, gt=0)
    num_classes: Optional[int] = Field(default=None, ge=2)
    kernel_choices: Optional[list[Literal[3, 5, 7]]] = None
    expansion_choices: Optional[list[float]] = None

    def build(self):
        overrides = {k: v for k, v in self.model_dump(exclude={"preset", "stages"}).items()
                     if v is not None}
        for key in ("kernel_choices", "expansion_choices"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        if self.stages is not None:
            overrides["stages"] = tuple(StageSpec(**s.model_dump()) for s in self.stages)
        if self.preset == "full":
            return full_space(**overrides)
        if self.preset == "custom":
            return SearchSpace(**overrides)
        return desk_space(**overrides)


class DataModel(_Model):
    kind: Literal["classification", "segmentation"] = "classification"
    num_classes: int = Field(default=8, ge=2)
    n_train: int = Field(default=2048, gt=0)
    n_val: int = Field(default=512, gt=0)
    n_test: int = Field(default=512, gt=0)
    resolution: int = Field(default=32, gt=0)
    seed: int = 0
    noise: float = Field(default=0.5, ge=0)
    jitter: float = Field(default=1.0, ge=0)

    def build(self):
        return DatasetSpec(**self.model_dump())


class TrainModel(_Model):
    epochs: int = Field(default=150, gt=0)
    batch_size: int = Field(default=128, gt=0)
    lr0: float = Field(default=0.045, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=4e-5, ge=0)
    subnets_per_step: int = Field(default=5, gt=0)
    width_list: list[float] = Field(default_factory=lambda: list(DEFAULT_EXPANSIONS))
    augment: bool = True
    sandwich: Literal["per_subnet", "per_step"] = "per_subnet"
    val_subnets: int = Field(default=2, ge=0)
    recal_batches: int = Field(default=8, gt=0)

    def build(self, seed):
        return TrainConfig(seed=seed, **self.model_dump())


class FinetuneModel(TrainModel):
    epochs: int = Field(default=50, gt=0)
    lr0: float = Field(default=0.01, gt=0)


class RetrainModel(TrainModel):
    epochs: int = Field(default=100, gt=0)
    lr0: float = Field(default=0.01, gt=0)
    subnets_per_step: Literal[1] = 1


class TrainStages(_Model):
    pretrain: TrainModel = Field(default_factory=TrainModel)
    finetune: FinetuneModel = Field(default_factory=FinetuneModel)
    retrain: RetrainModel = Field(default_factory=RetrainModel)


class SearchModel(_Model):
    population: int = Field(default=50, ge=2)
    generations: int = Field(default=30, ge=0)
    crossover: float = Field(default=0.5, ge=0, le=1)
    mutation: float = Field(default=0.25, ge=0, le=1)
    recal_batches: int = Field(default=8, gt=0)
    width_search: bool = True

    @field_validator("population")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("population must be even")
        return v


class HeadModel(_Model):
    channels: int = Field(default=64, gt=0)
    rates: list[int] = Field(default_factory=lambda: [1, 2, 4])


class DataStages(_Model):
    pretrain: DataModel = Field(default_factory=DataModel)
    target: DataModel = Field(default_factory=lambda: DataModel(seed=1))


class StudyModel(_Model):
    b_values: list[int] = Field(default_factory=lambda: [5])
    n_archs: int = Field(default=20, ge=2)
    retrain_epochs: Optional[int] = Field(default=None, gt=0)


class PipelineConfig(_Model):
    seed: int = 0
    output_dir: str = "runs/default"
    space: SpaceModel = Field(default_factory=SpaceModel)
    data: DataStages = Field(default_factory=DataStages)
    train: TrainStages = Field(default_factory=TrainStages)
    search: SearchModel = Field(default_factory=SearchModel)
    head: HeadModel = Field(default_factory=HeadModel)
    constraint: Union[Literal["small", "medium", "large"], int] = "large"
    study: StudyModel = Field(default_factory=StudyModel)

    def build_space(self):
        return self.space.build()

    def target_head(self):
        target = self.data.target
        if target.kind == "classification":
            return classification_head(self.build_space(), target.num_classes)
        return segmentation_head(target.num_classes, self.head.channels, tuple(self.head.rates))

    def pretrain_head(self):
        return classification_head(self.build_space(), self.data.pretrain.num_classes)

    def max_flops(self, space=None):
        space = space or self.build_space()
        if isinstance(self.constraint, str):
            return constraint_preset(space, self.constraint)
        return int(self.constraint)

    def evo_config(self):
        s = self.search
        return EvoConfig(population=s.population, generations=s.generations,
                         crossover=s.crossover, mutation=s.mutation,
                         max_flops=self.max_flops(), recal_batches=s.recal_batches,
                         seed=self.seed)

    def digest(self):
        """Hash of everything that influences results (not the output location)."""
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_yaml(self):
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _format_errors(err, source):
    lines = [f"{source}: invalid configuration"]
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data, source="<config>"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err, source)) from err
    try:
        cfg.build_space()
        cfg.evo_config()
        cfg.target_head()
        space = cfg.build_space()
        res = space.input_resolution
        unknown = sorted(set(cfg.train.finetune.width_list) - set(space.expansion_choices))
        if unknown:
            raise ConfigError(f"train.finetune.width_list has {unknown}, which are not "
                              "expansion choices of the space")
        for stage in ("pretrain", "target"):
            data = getattr(cfg.data, stage)
            data.build()
            if data.resolution != res:
                raise ConfigError(f"data.{stage}.resolution is {data.resolution} but the "
                                  f"space expects {res}x{res} inputs")
    except (NASError, TypeError, ValueError) as err:
        raise ConfigError(f"{source}: {err}") from err
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML: {err}") from err
    return parse_config(data, str(path))


def preset_path(name):
    return resources.files("oneshot_nas").joinpath("presets", f"{name}.yaml")


def load_preset(name, **overrides):
    """A shipped configuration, with top-level fields replaced by ``overrides``."""
    ref = preset_path(name)
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    data = yaml.safe_load(ref.read_text()) or {}
    data.update(overrides)
    return parse_config(data, f"preset:{name}")


def with_overrides(cfg, **changes):
    """Copy of ``cfg`` with dotted-path fields replaced, revalidated."""
    data = cfg.model_dump(mode="json")
    for dotted, value in changes.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return parse_config(data, "<overrides>")


__all__ = ["ConfigError", "PipelineConfig", "load_config", "load_preset", "parse_config",
           "preset_path", "with_overrides", "HeadSpec"]
