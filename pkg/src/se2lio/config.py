"""Run configuration: TOML file with one table per component."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataio import SENSOR_MODELS, SensorModel
from .features import FeatureParams
from .imu import ImuNoiseParams
from .map import MapParams
from .solver import PerturbationModel, SolverConfig

MODES = ("se2lo", "se2lio-sharp", "se2lio")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    mode: str = "se2lio"
    # keep the requested mode even when the IMU is too slow
    force_mode: bool = False
    min_imu_rate: float = 50.0
    max_gap: float = 0.5
    seed: int = 0
    threads: int = 1
    input: str | None = None
    output: str | None = None
    scan_format: str = "B"
    sensor: SensorModel = field(default_factory=lambda: SENSOR_MODELS["sim16"])
    features: FeatureParams = field(default_factory=FeatureParams)
    map: MapParams = field(default_factory=MapParams)
    perturbation: PerturbationModel = field(default_factory=PerturbationModel)
    imu: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    # prior standard deviations of the first state
    init_sigma_pose: float = 1e-4
    init_sigma_vel: float = 0.1
    init_sigma_ba: float = 0.02
    init_sigma_bg: float = 0.002

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scan_format.upper() not in ("A", "B"):
            raise ConfigError(f"scan_format must be A or B, got {self.scan_format!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def effective_perturbation(self) -> PerturbationModel:
        """Perturbation model for the active mode; the sharp variant ignores out-of-plane motion."""
        if self.mode == "se2lio-sharp":
            return PerturbationModel.zero(self.perturbation.sigma_k2)
        return self.perturbation

    def with_mode(self, mode: str) -> "PipelineConfig":
        return dataclasses.replace(self, mode=mode)


def _section(cls, data: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return data


def _perturbation(d: dict) -> PerturbationModel:
    d = dict(d)
    allowed = {"sigma_z", "sigma_k", "cov_theta"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [perturbation]: {sorted(unknown)}")
    kw = {}
    if "sigma_z" in d:
        kw["sigma_z2"] = float(d["sigma_z"]) ** 2
    if "sigma_k" in d:
        kw["sigma_k2"] = float(d["sigma_k"]) ** 2
    if "cov_theta" in d:
        c = np.asarray(d["cov_theta"], dtype=float)
        kw["cov_theta"] = c * np.eye(2) if c.ndim == 0 else c.reshape(2, 2)
    return PerturbationModel(**kw)


def from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    kw = {}
    sensor = data.pop("sensor", None)
    if sensor is not None:
        sensor = dict(sensor)
        base = SENSOR_MODELS.get(sensor.pop("model", "sim16"))
        if base is None:
            raise ConfigError(f"unknown sensor model; known: {sorted(SENSOR_MODELS)}")
        kw["sensor"] = dataclasses.replace(base, **_section(SensorModel, sensor, "sensor"))
    if "features" in data:
        kw["features"] = FeatureParams(**_section(FeatureParams, data.pop("features"), "features"))
    if "map" in data:
        kw["map"] = MapParams(**_section(MapParams, data.pop("map"), "map"))
    if "solver" in data:
        kw["solver"] = SolverConfig(**_section(SolverConfig, data.pop("solver"), "solver"))
    if "imu" in data:
        kw["imu"] = ImuNoiseParams(**_section(ImuNoiseParams, data.pop("imu"), "imu"))
    if "perturbation" in data:
        kw["perturbation"] = _perturbation(data.pop("perturbation"))
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    for key, value in data.items():
        if key not in top or isinstance(value, dict):
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = value
    try:
        return PipelineConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = from_dict(data)
    base = Path(path).resolve().parent
    # relative paths are taken from the config file's directory
    if cfg.input is not None and not Path(cfg.input).is_absolute():
        cfg.input = str(base / cfg.input)
    if cfg.output is not None and not Path(cfg.output).is_absolute():
        cfg.output = str(base / cfg.output)
    return cfg


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def to_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None or dataclasses.is_dataclass(v):
            continue
        out[f.name] = _plain(v)
    out["sensor"] = {k: _plain(v) for k, v in dataclasses.asdict(cfg.sensor).items() if k != "name"}
    out["sensor"]["model"] = cfg.sensor.name
    out["features"] = {k: _plain(v) for k, v in dataclasses.asdict(cfg.features).items()}
    out["map"] = dataclasses.asdict(cfg.map)
    out["solver"] = {k: v for k, v in dataclasses.asdict(cfg.solver).items() if v is not None}
    out["imu"] = {k: _plain(getattr(cfg.imu, k)) for k in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "g")}
    p = cfg.perturbation
    out["perturbation"] = {"sigma_z": float(np.sqrt(p.sigma_z2)), "sigma_k": float(np.sqrt(p.sigma_k2)),
                           "cov_theta": _plain(p.cov_theta)}
    return out


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(to_dict(cfg), fh)
