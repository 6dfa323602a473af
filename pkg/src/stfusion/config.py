"""Run configuration: a single validated YAML/JSON document per command.

Every section rejects unknown keys.  ``RunConfig.model_json_schema()`` is
what ``--print-schema`` prints.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = ["RunConfig", "ConfigError", "load_config", "config_hash", "ValidationError"]


class ConfigError(ValueError):
    """The configuration file is unreadable or fails validation."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MeshConfig(_Strict):
    """Structured triangulation over the domain, or a mesh text file."""

    domain: Optional[tuple[float, float, float, float]] = Field(
        None, description="xmin, xmax, ymin, ymax; defaults to the data extent")
    edge_length: float = Field(1.0, gt=0)
    buffer_width: Optional[float] = Field(None, ge=0, description="defaults to 3 x edge_length")
    buffer_edge_length: Optional[float] = Field(None, gt=0, description="defaults to edge_length")
    file: Optional[Path] = Field(None, description="mesh text file; overrides the structured settings")

    @field_validator("domain")
    @classmethod
    def _positive_area(cls, v):
        if v is not None and not (v[1] > v[0] and v[3] > v[2]):
            raise ValueError("domain must have xmax > xmin and ymax > ymin")
        return v


class PriorConfig(_Strict):
    kind: Literal["pc_range", "pc_sd", "pc_noise", "pc_ar1_cor", "normal", "lognormal", "fixed"]
    params: dict[str, float] = Field(default_factory=dict)


class LinearTrendConfig(_Strict):
    kind: Literal["linear_trend"] = "linear_trend"
    name: str = "trend"
    easting: float = 0.0
    northing: float = 0.0
    offset: float = 0.0


class RasterEffectConfig(_Strict):
    kind: Literal["raster"] = "raster"
    name: str
    path: Path = Field(description="block CSV layout (variable column ignored); nearest-cell lookup")


class Standardization(_Strict):
    center: float = 0.0
    scale: float = Field(1.0, gt=0)


class ModelConfig(_Strict):
    """Variables in field order; the last one is the response."""

    variables: list[str] = Field(min_length=1)
    fixed_effects: list[LinearTrendConfig | RasterEffectConfig] = Field(default_factory=list)
    priors: dict[str, PriorConfig] = Field(default_factory=dict,
                                           description="overrides keyed by hyperparameter name")
    point_only: bool = Field(False, description="drop all block observations")
    drop_blocks_of: list[str] = Field(default_factory=list, description="variables whose blocks are ignored")
    standardize: dict[str, Standardization] = Field(default_factory=dict)
    block_fallback: bool = True

    @model_validator(mode="after")
    def _known_variables(self):
        names = set(self.variables)
        if len(names) != len(self.variables):
            raise ValueError("variable names must be unique")
        unknown = (set(self.drop_blocks_of) | set(self.standardize)) - names
        if unknown:
            raise ValueError(f"unknown variable(s) {sorted(unknown)}")
        return self


class DataConfig(_Strict):
    points: Optional[Path] = None
    blocks: Optional[Path] = None
    time_map: Optional[Path] = None
    T: Optional[int] = Field(None, ge=1, description="time axis length; defaults to the latest time index")

    @model_validator(mode="after")
    def _something(self):
        if self.points is None and self.blocks is None:
            raise ValueError("at least one of points or blocks is required")
        return self


class InferenceConfig(_Strict):
    optimizer: Literal["quasi-newton", "nelder-mead"] = "quasi-newton"
    max_evals: int = Field(4000, ge=1)
    design: Literal["ccd", "mode"] = "ccd"
    ccd_radius_factor: float = Field(1.1, gt=1)
    dense_threshold: int = Field(0, ge=0, description="latent dimension below which dense algebra is used")
    latent_sd: bool = True


class PredictionConfig(_Strict):
    targets: Optional[Path] = Field(None, description="CSV with easting,northing,time")
    raster_cellsize: Optional[float] = Field(None, gt=0, description="also write ESRI ASCII grids")
    raster_times: list[int] = Field(default_factory=list, description="defaults to the last fitted time")
    quantiles: Literal["mixture", "gaussian"] = "mixture"


class TrueParamsConfig(_Strict):
    alpha: tuple[float, float, float] = (0.5, 0.8, 1.0)
    beta: tuple[float, float] = (-0.3, -0.4)
    theta: tuple[float] = (-0.2,)
    range: tuple[float, float, float] = (4.0, 3.0, 2.0)
    sigma2: tuple[float, float, float] = (1.0, 0.5, 0.3)
    tau2_point: tuple[float, float, float] = (0.09, 0.04, 0.01)
    tau2_block: tuple[float, float, float] = (0.25, 0.16, 0.09)
    ar: tuple[float, float, float] = (0.4, 0.5, 0.6)


class SimulationConfig(_Strict):
    true_params: TrueParamsConfig = Field(default_factory=TrueParamsConfig)
    domain: tuple[float, float, float, float] = (0.0, 10.0, 0.0, 5.0)
    trend: tuple[float, float] = (0.2, 0.3)
    T_total: int = Field(100, ge=2)
    t_train: list[int] = Field(default_factory=lambda: [3, 7, 10, 30], min_length=1)
    n_sensors_response: int = Field(22, ge=1)
    n_sensors_misaligned: int = Field(10, ge=1)
    grid_shape: tuple[int, int] = (10, 5)
    mc_points_per_cell: int = Field(2500, ge=1)
    n_test: int = Field(20, ge=1)
    generation_edge: float = Field(0.3, gt=0)
    generation_buffer: float = Field(8.0, ge=0)
    fit_edge: float = Field(1.0, gt=0)
    fit_buffer: float = Field(3.0, ge=0)
    fit_buffer_edge: float = Field(1.5, gt=0)
    n_replicates: int = Field(2, ge=1)
    models: list[Literal["point", "grid", "joint", "joint_missing_grid_covariates"]] = Field(
        default_factory=lambda: ["point", "grid", "joint"])
    scenarios: list[Literal["last_day", "one_day_ahead"]] = Field(
        default_factory=lambda: ["last_day", "one_day_ahead"])
    t_values: Optional[list[int]] = Field(None, description="subset of t_train to fit; defaults to all")

    @model_validator(mode="after")
    def _windows(self):
        if max(self.t_train) >= self.T_total:
            raise ValueError(f"t_train values must be below T_total = {self.T_total}")
        if min(self.t_train) < 1:
            raise ValueError("t_train values must be positive")
        if self.t_values is not None and not set(self.t_values) <= set(self.t_train):
            raise ValueError("t_values must be a subset of t_train")
        return self


class RunConfig(_Strict):
    """Top-level configuration shared by every command."""

    seed: int = 20240601
    threads: int = Field(1, ge=1)
    output_dir: Path = Path("out")
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    model: Optional[ModelConfig] = None
    data: Optional[DataConfig] = None
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    prediction: PredictionConfig = Field(default_factory=PredictionConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read and validate a YAML or JSON configuration.

    Relative paths inside the file are resolved against the file's directory.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = path.resolve().parent
    raw = {**raw, **(overrides or {})}
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return _resolve_paths(cfg, base)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        return None if p is None else (p if p.is_absolute() else base / p)

    updates = {}
    if cfg.data is not None:
        updates["data"] = cfg.data.model_copy(update={k: fix(getattr(cfg.data, k))
                                                      for k in ("points", "blocks", "time_map")})
    if cfg.mesh.file is not None:
        updates["mesh"] = cfg.mesh.model_copy(update={"file": fix(cfg.mesh.file)})
    if cfg.prediction.targets is not None:
        updates["prediction"] = cfg.prediction.model_copy(update={"targets": fix(cfg.prediction.targets)})
    if cfg.model is not None and cfg.model.fixed_effects:
        effects = [e.model_copy(update={"path": fix(e.path)}) if isinstance(e, RasterEffectConfig) else e
                   for e in cfg.model.fixed_effects]
        updates["model"] = cfg.model.model_copy(update={"fixed_effects": effects})
    return cfg.model_copy(update=updates)


RUNTIME_ONLY = ("threads", "output_dir")


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form.

    Independent of key order and formatting; the thread count and output
    directory do not change results and are left out.
    """
    text = json.dumps(cfg.model_dump(mode="json", exclude=set(RUNTIME_ONLY)), sort_keys=True,
                      separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def schema_json() -> str:
    return json.dumps(RunConfig.model_json_schema(), indent=2)
