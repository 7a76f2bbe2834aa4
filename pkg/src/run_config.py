"""
Run Config Module
Strict JSON run description of the ``estimate`` command. Unknown keys are
rejected, relative paths resolve against the config file's directory.
"""

import json
import os
import logging
import typing as std_typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, List, Optional

from src.analyzer import McemSettings
from src.errors import ConfigError
from src.prior import BLOCKS, NIX2Prior

logger = logging.getLogger("run_config")

THREADS_ENV = "CORTHICK_THREADS"


@dataclass
class PathsConfig:
    volume: Optional[str] = None
    mesh: Optional[str] = None
    mtf: Optional[str] = None
    psf_model: Optional[str] = None
    output_dir: str = "output"


@dataclass
class CalibrationConfig:
    slope: float = 1.0
    intercept: float = 0.0


@dataclass
class PsfConfig:
    """Used when the PSF is fitted from an MTF at run time"""
    slice_width_mm: float = 1.0
    components: Optional[int] = None
    seed: int = 0


@dataclass
class PatchConfig:
    target_count: int = 48


@dataclass
class ProfileConfig:
    """``voxel_model`` models the voxel footprint and the trilinear interpolation of every sample"""
    half_length_mm: float = 3.0
    step_mm: float = 0.1
    min_profiles: int = 11
    max_profiles: int = 51
    voxel_model: bool = True


@dataclass
class NoiseConfig:
    """Explicit SDs win over the background ROI estimate; ``sigma_grid`` is white noise per voxel"""
    sigma_eps: Optional[float] = None
    sigma_xi: Optional[float] = None
    sigma_grid: Optional[float] = None
    background_roi: Optional[List[List[int]]] = None


@dataclass
class PriorBlockConfig:
    mu0: Optional[float] = None
    sigma0_sq: Optional[float] = None
    kappa0: Optional[float] = None
    nu0: Optional[float] = None


@dataclass
class PriorConfig:
    w: PriorBlockConfig = field(default_factory=PriorBlockConfig)
    rho_bg: PriorBlockConfig = field(default_factory=PriorBlockConfig)
    rho_ct: PriorBlockConfig = field(default_factory=PriorBlockConfig)
    rho_tr: PriorBlockConfig = field(default_factory=PriorBlockConfig)
    s: PriorBlockConfig = field(default_factory=PriorBlockConfig)

    def build(self) -> NIX2Prior:
        overrides = {}
        for name in BLOCKS:
            values = {k: v for k, v in asdict(getattr(self, name)).items() if v is not None}
            if values:
                overrides[name] = values
        try:
            return NIX2Prior().with_overrides(overrides)
        except ValueError as e:
            raise ConfigError(str(e), field="prior")


@dataclass
class McemConfig:
    k0: Optional[int] = None
    k_max: Optional[int] = None
    growth_factor: float = 2.0
    stop_threshold: float = 0.05
    max_iterations: int = 200
    z: float = 1.645
    multiplier: Optional[float] = None
    shrinkage: float = 0.5

    def build(self) -> McemSettings:
        try:
            return McemSettings(**asdict(self))
        except ValueError as e:
            raise ConfigError(str(e), field="mcem")


@dataclass
class BaselineConfig:
    """``threshold`` defaults to the midpoint of the trabecular and cortical prior means"""
    threshold: Optional[float] = None
    tmd: float = 1200.0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    psf: PsfConfig = field(default_factory=PsfConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    profiles: ProfileConfig = field(default_factory=ProfileConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    mcem: McemConfig = field(default_factory=McemConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0
    threads: Optional[int] = None
    dump_profiles: bool = False
    plots: bool = False

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


def _check_scalar(value: Any, hint: Any, key: str, path: str) -> Any:
    origin = std_typing.get_origin(hint)
    args = std_typing.get_args(hint)
    if origin is std_typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = std_typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", path=path, field=key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", path=path, field=key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", path=path, field=key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", path=path, field=key)
        return value
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError("expected a list", path=path, field=key)
        return value
    return value


def _build(cls, data: Any, prefix: str, path: str):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path=path, field=prefix or "<root>")
    hints = std_typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError("unknown key", path=path, field=f"{prefix}{key}")
    values = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        key = f"{prefix}{f.name}"
        hint = hints[f.name]
        if is_dataclass(hint):
            values[f.name] = _build(hint, data[f.name], key + ".", path)
        else:
            values[f.name] = _check_scalar(data[f.name], hint, key, path)
    return cls(**values)


def parse_run_config(data: Dict[str, Any], path: str = "<config>") -> RunConfig:
    """Build a RunConfig from a decoded JSON object"""
    return _build(RunConfig, data, "", path)


def load_run_config(path: str) -> RunConfig:
    """
    Load and validate a run config file.

    Args:
        path: JSON config file

    Returns:
        RunConfig with absolute input paths

    Raises:
        ConfigError: unknown keys, wrong types or missing input files
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", path=path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", path=path)
    config = parse_run_config(data, path)

    base = os.path.dirname(os.path.abspath(path))

    def resolve(value: Optional[str]) -> Optional[str]:
        if value is None or os.path.isabs(value):
            return value
        return os.path.normpath(os.path.join(base, value))

    paths = config.paths
    config.paths = PathsConfig(volume=resolve(paths.volume), mesh=resolve(paths.mesh), mtf=resolve(paths.mtf),
                               psf_model=resolve(paths.psf_model), output_dir=resolve(paths.output_dir))
    validate_inputs(config, path)
    return config


def validate_inputs(config: RunConfig, path: str = "<config>") -> None:
    paths = config.paths
    for key in ("volume", "mesh"):
        value = getattr(paths, key)
        if value is None:
            raise ConfigError("missing input path", path=path, field=f"paths.{key}")
        if not os.path.isfile(value):
            raise ConfigError(f"file not found: {value}", path=path, field=f"paths.{key}")
    if (paths.mtf is None) == (paths.psf_model is None):
        raise ConfigError("exactly one of paths.mtf and paths.psf_model is required", path=path, field="paths")
    key = "mtf" if paths.mtf is not None else "psf_model"
    if not os.path.isfile(getattr(paths, key)):
        raise ConfigError(f"file not found: {getattr(paths, key)}", path=path, field=f"paths.{key}")
    if config.profiles.step_mm <= 0 or config.profiles.half_length_mm < config.profiles.step_mm:
        raise ConfigError("step must be positive and not exceed the half length", path=path, field="profiles")
    if config.profiles.min_profiles > config.profiles.max_profiles:
        raise ConfigError("min_profiles exceeds max_profiles", path=path, field="profiles")
    if config.calibration.slope <= 0:
        raise ConfigError("calibration slope must be positive", path=path, field="calibration.slope")


def with_overrides(config: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                   output_dir: Optional[str] = None, plots: Optional[bool] = None) -> RunConfig:
    """Apply command line flags on top of the file values"""
    if seed is not None:
        config = replace(config, seed=seed)
    if threads is not None:
        config = replace(config, threads=threads)
    if output_dir is not None:
        config = replace(config, paths=replace(config.paths, output_dir=output_dir))
    if plots:
        config = replace(config, plots=True)
    return config


def default_threads(config: RunConfig) -> int:
    """Pool size: config, then the CORTHICK_THREADS environment variable, then the CPU count"""
    if config.threads is not None:
        return max(1, config.threads)
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={value!r}")
    return os.cpu_count() or 1
