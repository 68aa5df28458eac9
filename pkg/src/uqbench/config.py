from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import Field, field_validator, model_validator
from pydantic_settings import BaseSettings, NoDecode, PydanticBaseSettingsSource, SettingsConfigDict

from .schemas import Aggregator, Method, RegressionMethod


class Settings(BaseSettings):
    debug: bool = False
    data_dir: Path = Path("data")
    out_dir: Path = Path("results")
    workers: int = Field(1, ge=1)

    model_config = SettingsConfigDict(env_prefix="UQBENCH_", env_file=".env", extra="ignore")


settings = Settings()

DESK_PRESET = {"spc": [1, 5, 10, 50, 100, 1000], "trials": 3, "epochs": 100, "min_steps": 1000}

Dataset = Literal["two_moons", "fashion_mnist", "mnist", "cifar10"]
OodDataset = Literal["mnist", "fashion_mnist", "svhn"]
DEFAULT_OOD: dict[str, str] = {"fashion_mnist": "mnist", "mnist": "fashion_mnist", "cifar10": "svhn"}


def _split_commas(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class RunConfig(BaseSettings):
    """
    Every option of a run.

    Values come from command-line flags, then the flat key=value file passed
    as ``_env_file``, then defaults (directory and worker defaults follow the
    UQBENCH_ environment). Unknown keys are rejected.
    """

    preset: Literal["desk"] | None = None
    dataset: Dataset = "two_moons"
    ood_dataset: OodDataset | None = None
    data_dir: Path = Field(default_factory=lambda: settings.data_dir)
    out_dir: Path = Field(default_factory=lambda: settings.out_dir)
    snapshot_dir: Path | None = None
    method: Annotated[list[Method], NoDecode] = Field(default_factory=lambda: [Method.baseline])
    aggregator: Annotated[list[Aggregator], NoDecode] = Field(default_factory=lambda: [Aggregator.l1])
    spc: Annotated[list[int], NoDecode] = Field(default_factory=lambda: [1, 5, 10, 50, 100, 250, 500, 1000, 5000])
    trials: int = Field(5, ge=1)
    epochs: int | None = Field(None, ge=0)
    batch_size: int = Field(64, ge=1)
    min_steps: int = Field(0, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    mc_samples: int = Field(50, ge=1)
    ensemble_size: int = Field(5, ge=1)
    drop_prob: float = Field(0.25, ge=0.0, lt=1.0)
    n_bins: int = Field(15, ge=1)
    seed: int = 0
    workers: int = Field(default_factory=lambda: settings.workers, ge=1)
    mode: Literal["two-moons", "regression"] = "two-moons"
    grid_resolution: int = Field(100, ge=2)
    n_samples: Annotated[list[int], NoDecode] = Field(default_factory=lambda: [25, 50, 100, 200])
    regression_method: Annotated[list[RegressionMethod], NoDecode] = Field(default_factory=lambda: list(RegressionMethod))

    model_config = SettingsConfigDict(env_prefix="", extra="forbid")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, dotenv_settings

    @field_validator("method", "aggregator", "spc", "n_samples", "regression_method", mode="before")
    @classmethod
    def _comma_lists(cls, value: Any) -> Any:
        return _split_commas(value)

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("preset") == "desk":
            for key, value in DESK_PRESET.items():
                data.setdefault(key, value)
        return data

    @field_validator("spc")
    @classmethod
    def _increasing(cls, values: list[int]) -> list[int]:
        if not values or values[0] < 1 or any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"spc values must be positive and strictly increasing: {values}")
        return values

    @property
    def resolved_ood(self) -> str | None:
        if self.dataset == "two_moons":
            return None
        return self.ood_dataset or DEFAULT_OOD[self.dataset]

    def manifest_values(self) -> dict[str, str]:
        """Flat key=value text for every set field; reloading it gives the same config."""
        values = {}
        for name, value in self.model_dump(mode="json").items():
            if value is None:
                continue
            values[name] = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
        return values


def load_run_config(config_path: Path | None = None, **flags: Any) -> RunConfig:
    """Build a RunConfig from flags (``None`` means not given) over an optional config file."""
    given = {key: value for key, value in flags.items() if value is not None}
    return RunConfig(_env_file=config_path, **given)
