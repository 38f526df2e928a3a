"""Pipeline configuration: nested dataclasses <-> strict YAML.

Unknown keys are rejected so typos fail loudly; seeds are mandatory (no
wall-clock seeding anywhere). ``parse(serialize(config)) == config``.
"""

import dataclasses
from dataclasses import dataclass, field as dc_field

import yaml

from .trainer import DynamicFitConfig, StaticFitConfig

__all__ = ["ConfigError", "PipelineConfig", "load_config", "save_config",
           "config_from_dict", "config_to_dict"]


class ConfigError(ValueError):
    pass


@dataclass
class CameraConfig:
    radius: float = 1.5
    fov_y: float = 49.1
    width: int = 256
    height: int = 256


@dataclass
class HexPlaneConfig:
    spatial_resolution: int = 32
    temporal_resolution: int = 32
    feature_dim: int = 32
    hidden_dim: int = 64


@dataclass
class MeshConfig:
    grid_resolution: int = 128
    iso: float = 1.0
    texture_resolution: int = 1024
    backprojection_azimuths: int = 8
    backprojection_elevations: tuple = (-30.0, 30.0)
    frames: int = 14


@dataclass
class RefineConfig:
    iterations: int = 50
    noise_level: float = 0.7
    lr: float = 0.05


@dataclass
class GuidanceConfig:
    kind: str = "none"            # none | oracle | external
    target_ply: str = ""          # oracle: hidden-target cloud
    command: tuple = ()           # external: argv of the provider process

    def __post_init__(self):
        if self.kind not in ("none", "oracle", "external"):
            raise ConfigError(f"unknown guidance kind {self.kind!r}")


@dataclass
class PathsConfig:
    workdir: str = "."


@dataclass
class PipelineConfig:
    seed: int = 0
    camera: CameraConfig = dc_field(default_factory=CameraConfig)
    static: StaticFitConfig = dc_field(default_factory=StaticFitConfig)
    dynamic: DynamicFitConfig = dc_field(default_factory=DynamicFitConfig)
    hexplane: HexPlaneConfig = dc_field(default_factory=HexPlaneConfig)
    mesh: MeshConfig = dc_field(default_factory=MeshConfig)
    refine: RefineConfig = dc_field(default_factory=RefineConfig)
    guidance: GuidanceConfig = dc_field(default_factory=GuidanceConfig)
    paths: PathsConfig = dc_field(default_factory=PathsConfig)


def _coerce(value, target):
    """Normalize YAML scalars/containers to the dataclass field's shape."""
    if isinstance(target, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a sequence, got {value!r}")
        return tuple(value)
    if isinstance(target, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}")
        if float(value) != int(value):
            raise ConfigError(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(target, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}")
        return {k: float(v) for k, v in value.items()}
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}")
        return value
    return value


def _fill_dataclass(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    obj = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}: unknown key {key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            setattr(obj, key, _fill_dataclass(type(current), value, f"{path}.{key}"))
        else:
            try:
                setattr(obj, key, _coerce(value, current))
            except ConfigError as exc:
                raise ConfigError(f"{path}.{key}: {exc}") from None
    try:
        obj.__post_init__()
    except AttributeError:
        pass
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return obj


def config_from_dict(data) -> PipelineConfig:
    cfg = _fill_dataclass(PipelineConfig, data, "config")
    if data is None or "seed" not in data:
        raise ConfigError("config: a seed is mandatory (no wall-clock seeding)")
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    def unpack(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: unpack(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [unpack(v) for v in obj]
        if isinstance(obj, dict):
            return {k: unpack(v) for k, v in obj.items()}
        return obj

    return unpack(cfg)


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return config_from_dict(data)


def save_config(path, cfg: PipelineConfig):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
