"""Configuration models and helpers for aptsbench."""

from __future__ import annotations

import os
from enum import StrEnum
from pathlib import Path
from typing import Any, Self, cast

from omegaconf import DictConfig, OmegaConf
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from aptsbench.data.datasets import BatchMode
from aptsbench.models.network import Activation
from aptsbench.numeric import Norm
from aptsbench.optim.decomposition import PartitionStrategy

PROJECT_ROOT = Path(__file__).resolve().parents[2]

ADAM_DEFAULT_LR = 0.0025
SGD_DEFAULT_LR = 0.1


def data_root(*, create: bool = True) -> Path:
    """
    Return the resolved data root used for external datasets.

    The location defaults to ``$DATA_ROOT/aptsbench`` when ``DATA_ROOT`` is defined in
    the environment. Otherwise the project local ``data/aptsbench`` directory is used.
    """
    base_env = os.environ.get("DATA_ROOT")
    base_root = Path(base_env).expanduser() if base_env else PROJECT_ROOT / "data"
    root = (base_root / "aptsbench").resolve()
    if create:
        root.mkdir(parents=True, exist_ok=True)
    return root


def output_root() -> Path:
    """Return the project-specific directory used for relative output paths."""
    base_env = os.environ.get("OUT_DIR")
    base_root = Path(base_env).expanduser() if base_env else PROJECT_ROOT / "out"
    root = (base_root / "aptsbench").resolve()
    root.mkdir(parents=True, exist_ok=True)
    return root


class ConfigError(ValueError):
    """Raised for unknown, duplicated, unparsable, or invalid configuration keys."""

    def __init__(self, key: str, line: int | None, message: str) -> None:
        self.key = key
        self.line = line
        location = f"line {line}: " if line is not None else ""
        super().__init__(f"{location}{key}: {message}")


class ConfigModel(BaseModel):
    """Base model that rejects misspelled or unsupported configuration keys."""

    model_config = ConfigDict(extra="forbid")


class FrozenConfigModel(BaseModel):
    """Immutable variant handed to optimizers that run on worker threads."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class HessianProxy(StrEnum):
    IDENTITY = "identity"
    LBFGS = "lbfgs"


class LocalSolver(StrEnum):
    TR = "tr"
    CADAM = "cadam"


class MomentPolicy(StrEnum):
    RESET = "reset"
    PERSIST = "persist"


class OptimizerId(StrEnum):
    APTS = "apts"
    IAPTS = "iapts"
    TR = "tr"
    ADAM = "adam"
    SGD = "sgd"


class DatasetId(StrEnum):
    TWO_MOONS = "two_moons"
    MNIST_IDX = "mnist_idx"


class TrParams(FrozenConfigModel):
    """Acceptance thresholds, radius factors, and radius bounds of the trust-region loop."""

    eta1: float = Field(default=0.1, gt=0.0, lt=1.0)
    eta2: float = Field(default=0.75, gt=0.0, lt=1.0)
    gamma_dec: float = Field(default=0.5, gt=0.0, lt=1.0)
    gamma_inc: float = Field(default=2.0, ge=1.0)
    norm: Norm = Field(default=Norm.L2)
    delta_min: float = Field(default=1e-12, gt=0.0)
    delta_max: float = Field(default=1e4, gt=0.0)
    hessian: HessianProxy = Field(default=HessianProxy.IDENTITY)
    lbfgs_memory: int = Field(default=10, ge=1, le=100)

    @model_validator(mode="after")
    def validate_ordering(self) -> Self:
        if not self.eta1 < self.eta2:
            raise ValueError("eta1 must be smaller than eta2")
        if self.delta_min > self.delta_max:
            raise ValueError("delta_min cannot exceed delta_max")
        return self

    def clamp(self, delta: float) -> float:
        return min(max(delta, self.delta_min), self.delta_max)


def _default_global_tr() -> TrParams:
    return TrParams(norm=Norm.LINF)


class AptsConfig(FrozenConfigModel):
    """Outer-loop settings of the additively preconditioned trust-region strategy."""

    subdomain_count: int = Field(default=2, ge=1)
    inner_iters: int = Field(default=5, ge=1, description="Local iterations m per outer step.")
    global_tr_iters: int = Field(default=1, ge=0, description="Global TR sweep length m_G.")
    tr: TrParams = Field(default_factory=_default_global_tr)
    local_solver: LocalSolver = Field(default=LocalSolver.TR)
    partition_strategy: PartitionStrategy = Field(default=PartitionStrategy.EVEN_BLOCKS)
    moment_policy: MomentPolicy = Field(default=MomentPolicy.RESET)
    feed_back_radius: bool = Field(
        default=True,
        description="Carry the global sweep's final radius into the next outer iteration.",
    )
    n_jobs: int | None = Field(
        default=None,
        description="Worker threads for subdomain solves; None uses one per subdomain.",
    )


class IaptsConfig(AptsConfig):
    """Inexact variant: layer-block subdomains solved with CAdam from cached boundary data."""

    local_iters: int = Field(default=5, ge=1)
    lr_init: float = Field(default=0.01, gt=0.0)
    lr_min: float = Field(default=0.001, gt=0.0)
    lr_max: float = Field(default=1.0, gt=0.0)
    local_solver: LocalSolver = Field(default=LocalSolver.CADAM)
    partition_strategy: PartitionStrategy = Field(default=PartitionStrategy.LAYER_BLOCKS)

    @model_validator(mode="after")
    def validate_radius_bounds(self) -> Self:
        if not self.lr_min <= self.lr_init <= self.lr_max:
            raise ValueError("lr_init must lie within [lr_min, lr_max]")
        if self.local_solver is not LocalSolver.CADAM:
            raise ValueError("inexact APTS only supports the cadam local solver")
        if self.partition_strategy is not PartitionStrategy.LAYER_BLOCKS:
            raise ValueError("inexact APTS needs layer-blocks partitions")
        return self

    @property
    def global_tr(self) -> TrParams:
        """Global TR parameters with the radius bounds taken from ``lr_min``/``lr_max``."""
        return self.tr.model_copy(update={"delta_min": self.lr_min, "delta_max": self.lr_max})


class RunConfig(ConfigModel):
    """Flat experiment description read from a ``key=value`` file."""

    optimizer: OptimizerId
    dataset: DatasetId
    hidden_sizes: list[int] = Field(default_factory=lambda: [16, 16], min_length=1)
    activation: Activation = Field(default=Activation.TANH)
    samples: int = Field(default=1000, ge=2, description="Two-moons sample count M.")
    noise: float = Field(default=0.1, ge=0.0)
    data_seed: int = Field(default=0, ge=0)
    images_path: Path | None = Field(default=None)
    labels_path: Path | None = Field(default=None)
    limit: int | None = Field(default=None, ge=1, description="Keep the first N IDX samples.")
    subdomain_count: int = Field(default=2, ge=1)
    inner_iters: int = Field(default=5, ge=1)
    global_tr_iters: int = Field(default=1, ge=0)
    local_iters: int = Field(default=5, ge=1)
    local_solver: LocalSolver = Field(default=LocalSolver.TR)
    eta1: float = Field(default=0.1, gt=0.0, lt=1.0)
    eta2: float = Field(default=0.75, gt=0.0, lt=1.0)
    gamma_dec: float = Field(default=0.5, gt=0.0, lt=1.0)
    gamma_inc: float = Field(default=2.0, ge=1.0)
    norm: Norm = Field(default=Norm.LINF)
    hessian: HessianProxy = Field(default=HessianProxy.IDENTITY)
    delta_init: float = Field(default=0.1, gt=0.0)
    delta_min: float = Field(default=1e-6, gt=0.0)
    delta_max: float = Field(default=1.0, gt=0.0)
    lr_init: float = Field(default=0.01, gt=0.0)
    lr_min: float = Field(default=0.001, gt=0.0)
    lr_max: float = Field(default=1.0, gt=0.0)
    lr: float | None = Field(default=None, gt=0.0, description="Adam/SGD baseline rate.")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(default=100, ge=1)
    batch_mode: BatchMode = Field(default=BatchMode.SHUFFLED)
    epochs: int = Field(default=10, ge=0)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    output: Path = Field(default=Path("metrics.csv"))
    moment_policy: MomentPolicy = Field(default=MomentPolicy.RESET)
    feed_back_radius: bool = Field(default=True)
    n_jobs: int | None = Field(default=None)
    timing: bool = Field(default=False, description="Record wall time (breaks byte-identity).")
    validation_fraction: float = Field(default=0.0, ge=0.0, le=0.5)

    @field_validator("hidden_sizes", "seeds", mode="before")
    @classmethod
    def split_comma_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        if isinstance(value, int):
            return [value]
        return value

    @model_validator(mode="after")
    def fill_and_check(self) -> Self:
        if self.lr is None:
            if self.optimizer is OptimizerId.ADAM:
                self.lr = ADAM_DEFAULT_LR
            elif self.optimizer is OptimizerId.SGD:
                self.lr = SGD_DEFAULT_LR
        if not self.eta1 < self.eta2:
            raise ValueError("eta1 must be smaller than eta2")
        if not self.lr_min <= self.lr_init <= self.lr_max:
            raise ValueError("lr_init must lie within [lr_min, lr_max]")
        if self.delta_min > self.delta_max:
            raise ValueError("delta_min cannot exceed delta_max")
        if self.dataset is DatasetId.MNIST_IDX and (
            self.images_path is None or self.labels_path is None
        ):
            raise ValueError("mnist_idx needs images_path and labels_path")
        if self.dataset is DatasetId.TWO_MOONS and self.samples % 2:
            raise ValueError("two_moons needs an even sample count")
        return self

    def tr_params(self) -> TrParams:
        return TrParams(
            eta1=self.eta1,
            eta2=self.eta2,
            gamma_dec=self.gamma_dec,
            gamma_inc=self.gamma_inc,
            norm=self.norm,
            delta_min=self.delta_min,
            delta_max=self.delta_max,
            hessian=self.hessian,
        )

    def apts_config(self) -> AptsConfig:
        return AptsConfig(
            subdomain_count=self.subdomain_count,
            inner_iters=self.inner_iters,
            global_tr_iters=self.global_tr_iters,
            tr=self.tr_params(),
            local_solver=self.local_solver,
            moment_policy=self.moment_policy,
            feed_back_radius=self.feed_back_radius,
            n_jobs=self.n_jobs,
        )

    def iapts_config(self) -> IaptsConfig:
        return IaptsConfig(
            subdomain_count=self.subdomain_count,
            global_tr_iters=self.global_tr_iters,
            tr=self.tr_params(),
            moment_policy=self.moment_policy,
            feed_back_radius=self.feed_back_radius,
            n_jobs=self.n_jobs,
            local_iters=self.local_iters,
            lr_init=self.lr_init,
            lr_min=self.lr_min,
            lr_max=self.lr_max,
        )


def parse_config(path: Path) -> RunConfig:
    """Parse a ``key=value`` experiment file; see ``load_config`` for overrides."""
    return load_config(path)


def load_config(path: Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Build a RunConfig from a flat ``key=value`` file and optional dotted overrides.

    Lines are ``key = value`` with ``#`` comments. Values are typed through OmegaConf's
    dotlist grammar, so ``0.1`` is a float, ``true`` a bool, and ``[1, 2]`` a list.
    """
    entries, lines = _read_key_values(path)

    config_cfg = OmegaConf.create({})
    for key, raw in entries.items():
        try:
            item = OmegaConf.from_dotlist([f"{key}={raw}"])
        except Exception as exc:
            raise ConfigError(key, lines[key], f"cannot parse value '{raw}'") from exc
        config_cfg = cast(DictConfig, OmegaConf.merge(config_cfg, item))

    if overrides:
        for dotted_key, value in overrides.items():
            if value is None:
                continue
            converted = str(value) if isinstance(value, Path) else value
            OmegaConf.update(config_cfg, dotted_key, converted, merge=True)

    container = OmegaConf.to_container(config_cfg, resolve=True)
    if not isinstance(container, dict):  # pragma: no cover - guarded by DictConfig above
        raise ValueError("Merged configuration must be a mapping.")
    try:
        config = RunConfig.model_validate(cast(dict[str, Any], container))
    except ValidationError as exc:
        first = exc.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else "config"
        message = "missing required key" if first["type"] == "missing" else first["msg"]
        raise ConfigError(key, lines.get(key), message) from exc
    return _resolve_relative_paths(config)


def _read_key_values(path: Path) -> tuple[dict[str, str], dict[str, int]]:
    known = set(RunConfig.model_fields)
    entries: dict[str, str] = {}
    lines: dict[str, int] = {}
    for number, raw_line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = raw_line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(text, number, "expected 'key = value'")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in known:
            raise ConfigError(key, number, "unknown key")
        if key in entries:
            raise ConfigError(key, number, f"duplicate key (first set on line {lines[key]})")
        if not value:
            raise ConfigError(key, number, "missing value")
        entries[key] = value
        lines[key] = number
    return entries, lines


def _resolve_relative_paths(config: RunConfig) -> RunConfig:
    updates: dict[str, Any] = {}
    for key in ("images_path", "labels_path"):
        path = getattr(config, key)
        if path is not None:
            updates[key] = _resolve_data_path(path, data_root(create=False))
    output = config.output
    if not output.is_absolute():
        output = (output_root() / output).resolve()
    output.parent.mkdir(parents=True, exist_ok=True)
    updates["output"] = output
    return config.model_copy(update=updates)


def _resolve_data_path(path_value: Path | str, data_root: Path) -> Path:
    candidate = path_value if isinstance(path_value, Path) else Path(path_value)
    if candidate.is_absolute():
        return candidate
    repo_candidate = (PROJECT_ROOT / candidate).resolve()
    if repo_candidate.exists():
        return repo_candidate
    return (data_root / candidate).resolve()
