################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Run configuration: one YAML file whose sections map onto the pydantic
models below. Every field has a default, so an empty file is valid.

(c) 2025 Stanley Solutions
"""
################################################################################

from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic import model_validator

from icft.corpus import BUNDLED_CORPUS, GENERAL_CORPUS
from icft.errors import ConfigError
from icft.memory import MemoryConfig
from icft.model import ModelConfig
from icft.training import AblationFlags, LossMode, TrainPlan

DEFAULT_CONFIG = Path(__file__).parent / "default_config.yaml"


class ModelOptions(ModelConfig):
    """Model section; the vocabulary size normally comes from the corpus."""

    vocab_size: Optional[int] = Field(default=None, ge=2)

    def resolve(self, vocab_size: int) -> ModelConfig:
        """Concrete model config for a vocabulary."""
        if self.vocab_size is not None and self.vocab_size != vocab_size:
            raise ConfigError(
                f"model.vocab_size is {self.vocab_size} but the corpus "
                f"vocabulary has {vocab_size} tokens"
            )
        return ModelConfig(**{**self.model_dump(), "vocab_size": vocab_size})


class MetricOptions(BaseModel):
    """Evaluation switches."""

    model_config = ConfigDict(extra="forbid")

    allow_unknown_tokens: bool = False
    per_response_distinct: bool = False
    max_new_tokens: Optional[int] = Field(default=None, ge=1)


class PathOptions(BaseModel):
    """Input and output locations."""

    model_config = ConfigDict(extra="forbid")

    corpus: Path = BUNDLED_CORPUS
    pretrain_corpus: Optional[Path] = GENERAL_CORPUS
    output_dir: Path = Path("runs/latest")
    log_config: Optional[Path] = None

    def relative_to(self, base: Path) -> "PathOptions":
        """Resolve relative paths given in a file against its directory.

        Defaults stay as they are: the output directory follows the working
        directory unless the file names one.
        """
        def anchor(name):
            path = getattr(self, name)
            if name not in self.model_fields_set:
                return path
            if path is None or path.is_absolute():
                return path
            return base / path

        return PathOptions(
            corpus=anchor("corpus"),
            pretrain_corpus=anchor("pretrain_corpus"),
            output_dir=anchor("output_dir"),
            log_config=anchor("log_config"),
        )


class RunConfig(BaseModel):
    """Everything one CLI invocation needs; `seed` drives every stream."""

    model_config = ConfigDict(extra="forbid")

    model: ModelOptions = Field(default_factory=ModelOptions)
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    plan: TrainPlan = Field(default_factory=TrainPlan)
    metrics: MetricOptions = Field(default_factory=MetricOptions)
    ablations: AblationFlags = Field(default_factory=AblationFlags)
    paths: PathOptions = Field(default_factory=PathOptions)
    seed: int = 0

    @model_validator(mode="after")
    def _share_seed(self) -> "RunConfig":
        self.model = self.model.model_copy(update={"seed": self.seed})
        self.plan = self.plan.model_copy(update={"seed": self.seed})
        return self

    def with_overrides(
        self,
        seed: Optional[int] = None,
        no_memory: Optional[bool] = None,
        no_curriculum: Optional[bool] = None,
        no_lora: Optional[bool] = None,
        loss_mode: Optional[LossMode] = None,
    ) -> "RunConfig":
        """Copy with command-line flags applied on top of file values."""
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
        for flag, value in (
            ("no_memory", no_memory),
            ("no_curriculum", no_curriculum),
            ("no_lora", no_lora),
        ):
            if value:
                data["ablations"][flag] = True
        if loss_mode is not None:
            data["plan"]["loss_mode"] = loss_mode
        try:
            return RunConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"invalid override: {exc}") from exc


def load_settings(path: Optional[Path] = None) -> RunConfig:
    """Parse a YAML run configuration; relative paths follow the file."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as config_file:
            raw = yaml.safe_load(config_file) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping of sections")
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc
    config.paths = config.paths.relative_to(path.parent.resolve())
    if not config.paths.corpus.exists():
        raise ConfigError(f"corpus {config.paths.corpus} does not exist")
    pretrain = config.paths.pretrain_corpus
    if pretrain is not None and not pretrain.exists():
        raise ConfigError(f"pretraining corpus {pretrain} does not exist")
    if config.paths.log_config and not config.paths.log_config.exists():
        raise ConfigError(
            f"log config {config.paths.log_config} does not exist"
        )
    return config


active = RunConfig()


def get_settings() -> RunConfig:
    """Get the active run configuration."""
    return active


def set_settings(config: RunConfig) -> RunConfig:
    """Replace the active run configuration."""
    global active  # pylint: disable=global-statement
    active = config
    return active
