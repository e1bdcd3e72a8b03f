"""
Configuration files for scenes and training runs.

Files are read and written with configparser: one section per concern
([scene], [train], [paths]) and `#` comments. Values are written with repr()
so that loading a saved file gives back exactly the same dataclass.
"""
import ast
import configparser
import logging
import types
import typing
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Optional

from .constants import \
    CHAMFER_THRESHOLD, \
    CHECKPOINT_INTERVAL, \
    DENSIFY_FROM, \
    DENSIFY_GRAD_THRESHOLD, \
    DENSIFY_INTERVAL, \
    DENSIFY_UNTIL_FRACTION, \
    DSSIM_WEIGHT, \
    FEATURE_NAMES, \
    KNN, \
    KNN_REFRESH, \
    LOG_INTERVAL, \
    LR_COLOR, \
    LR_OPACITY, \
    LR_POSITION_FINAL, \
    LR_POSITION_INIT, \
    LR_ROTATION, \
    LR_SCALE, \
    MAX_ITERATIONS, \
    PERCENT_DENSE, \
    PHOTO_WEIGHT, \
    PRUNE_OPACITY, \
    SCENE_KINDS
from .errors import ConfigError, InvalidSceneSpecError
from .features import FeatureKind


logger = logging.getLogger('eigensplat')

TRAIN_SECTION = 'train'
SCENE_SECTION = 'scene'
PATHS_SECTION = 'paths'


@dataclass
class TrainConfig:
    h_photo: float = PHOTO_WEIGHT
    theta: float = DSSIM_WEIGHT
    feature: str = 'none'
    k: int = KNN
    knn_refresh: int = KNN_REFRESH
    max_iterations: int = MAX_ITERATIONS
    target_psnr: Optional[float] = None
    lr_color: float = LR_COLOR
    lr_opacity: float = LR_OPACITY
    lr_scale: float = LR_SCALE
    lr_rotation: float = LR_ROTATION
    lr_position_init: float = LR_POSITION_INIT
    lr_position_final: float = LR_POSITION_FINAL
    densify_interval: int = DENSIFY_INTERVAL
    densify_from: int = DENSIFY_FROM
    densify_until_fraction: float = DENSIFY_UNTIL_FRACTION
    densify_grad_threshold: float = DENSIFY_GRAD_THRESHOLD
    prune_opacity: float = PRUNE_OPACITY
    percent_dense: float = PERCENT_DENSE
    planarity_on_squared_scales: bool = False
    log_interval: int = LOG_INTERVAL
    checkpoint_interval: int = CHECKPOINT_INTERVAL
    holdout_every: int = 0
    eval_min_opacity: float = 0.0
    chamfer_threshold: float = CHAMFER_THRESHOLD
    seed: int = 0
    progress: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.feature not in FEATURE_NAMES:
            raise ConfigError(f'Unknown feature {self.feature!r}, expected one of {", ".join(FEATURE_NAMES)}')
        if self.h_photo <= 0:
            raise ConfigError(f'h_photo must be positive, got {self.h_photo}')
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f'theta must lie in [0, 1], got {self.theta}')
        rates = [self.lr_color, self.lr_opacity, self.lr_scale, self.lr_rotation,
                 self.lr_position_init, self.lr_position_final]
        if min(rates) <= 0:
            raise ConfigError('All learning rates must be positive')
        if self.k < 3:
            raise ConfigError(f'k must be at least 3, got {self.k}')
        if self.max_iterations < 0:
            raise ConfigError(f'max_iterations must not be negative, got {self.max_iterations}')
        for name in ('knn_refresh', 'densify_interval', 'log_interval'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1')
        if self.checkpoint_interval < 0 or self.holdout_every < 0:
            raise ConfigError('checkpoint_interval and holdout_every must not be negative')
        if self.holdout_every == 1:
            raise ConfigError('holdout_every = 1 would leave no training views')

    @property
    def feature_kind(self) -> Optional[FeatureKind]:
        return FeatureKind.from_name(self.feature)

    @property
    def densify_until(self) -> int:
        return int(self.densify_until_fraction * self.max_iterations)


@dataclass
class SceneSpec:
    """
    Synthetic scene description. Lengths are scene units; extent is the edge
    length of the surface, and the Chamfer mask threshold is in the same units.
    """
    kind: str = 'plane'
    extent: float = 100.0
    checker_period: int = 4
    color_a: tuple[float, float, float] = (0.85, 0.35, 0.2)
    color_b: tuple[float, float, float] = (0.2, 0.45, 0.8)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    camera_count: int = 8
    camera_radius: float = 180.0
    camera_elevation: float = 35.0
    fov: float = 50.0
    image_size: int = 64
    supersample: int = 2
    surface_samples: int = 5000
    init_points: int = 2000
    init_noise: float = 1.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in SCENE_KINDS:
            raise InvalidSceneSpecError(f'Unknown scene kind {self.kind!r}, expected one of {", ".join(SCENE_KINDS)}')
        if self.extent <= 0:
            raise InvalidSceneSpecError(f'extent must be positive, got {self.extent}')
        if self.camera_count < 3:
            raise InvalidSceneSpecError(f'At least 3 cameras are needed, got {self.camera_count}')
        if self.camera_radius <= 0 or not 0 < self.fov < 180:
            raise InvalidSceneSpecError('camera_radius must be positive and fov inside (0, 180)')
        if not -90 < self.camera_elevation < 90:
            raise InvalidSceneSpecError(f'camera_elevation must lie in (-90, 90), got {self.camera_elevation}')
        if self.image_size < 11 or self.supersample < 1 or self.checker_period < 1:
            raise InvalidSceneSpecError('image_size must be at least 11, supersample and checker_period at least 1')
        if self.surface_samples < 1 or self.init_points < 4:
            raise InvalidSceneSpecError('Need at least 1 surface sample and 4 initial points')
        if self.init_noise < 0 or not 0.0 <= self.outlier_fraction < 1.0:
            raise InvalidSceneSpecError('init_noise must be >= 0 and outlier_fraction inside [0, 1)')
        for name in ('color_a', 'color_b', 'background'):
            color = getattr(self, name)
            if len(color) != 3 or min(color) < 0.0 or max(color) > 1.0:
                raise InvalidSceneSpecError(f'{name} must be three values in [0, 1]')


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene_dir: Path = Path('.')
    output_dir: Path = Path('run')
    init_gaussians: Optional[Path] = None


def _parse(raw: str, hint: Any, key: str) -> Any:
    """
    Convert one config value to the annotated field type.
    """
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        if raw.strip() in ('None', ''):
            return None
        return _parse(raw, args[0], key)
    if hint is str:
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            return raw.strip()
        return value if isinstance(value, str) else raw.strip()
    if hint is bool:
        lowered = raw.strip().lower()
        if lowered in ('true', 'yes', 'on', '1'):
            return True
        if lowered in ('false', 'no', 'off', '0'):
            return False
        raise ConfigError(f'{key}: expected a boolean, got {raw!r}')
    try:
        value = ast.literal_eval(raw.strip())
    except (ValueError, SyntaxError) as err:
        raise ConfigError(f'{key}: cannot parse {raw!r}') from err
    if origin is tuple:
        return tuple(float(item) for item in value)
    if hint is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f'{key}: expected an integer, got {raw!r}')
        return int(value)
    if hint is float:
        return float(value)
    return value


def _format(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, Path):
        return str(value)
    return repr(value)


def _from_section(cls, section: configparser.SectionProxy):
    hints = typing.get_type_hints(cls)
    known = {item.name for item in fields(cls)}
    unknown = sorted(set(section.keys()) - known)
    if unknown:
        raise ConfigError(f'Unknown keys in [{section.name}]: {", ".join(unknown)}')
    values = {key: _parse(section[key], hints[key], key) for key in section.keys()}
    return cls(**values)


def _to_section(obj) -> dict[str, str]:
    return {key: _format(value) for key, value in asdict(obj).items()}


def _read(path: Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'Config file {path} does not exist')
    config = configparser.ConfigParser(inline_comment_prefixes=('#',))
    try:
        config.read(path)
    except configparser.Error as err:
        raise ConfigError(f'Malformed config {path}: {err}') from err
    logger.debug(f'Loaded config {path}')
    return config


def _write(config: configparser.ConfigParser, path: Path, header: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open(mode='w') as config_file:
        config_file.write(f'# {header}\n')
        config.write(config_file)
    logger.info(f'Wrote config: {path}')


def load_scene_spec(path: Path) -> SceneSpec:
    config = _read(path)
    if SCENE_SECTION not in config:
        raise ConfigError(f'{path} has no [{SCENE_SECTION}] section')
    try:
        return _from_section(SceneSpec, config[SCENE_SECTION])
    except (TypeError, InvalidSceneSpecError) as err:
        raise ConfigError(f'{path}: {err}') from err


def save_scene_spec(spec: SceneSpec, path: Path):
    config = configparser.ConfigParser()
    config[SCENE_SECTION] = _to_section(spec)
    _write(config, path, 'eigensplat synthetic scene')


def train_config_from_section(section: configparser.SectionProxy) -> TrainConfig:
    return _from_section(TrainConfig, section)


def load_run_config(path: Path) -> RunConfig:
    """
    Read a run config. Relative paths are resolved against the config file's
    directory; the scene directory and any initial Gaussian PLY must exist.
    :param path:
    :return:
    """
    path = Path(path)
    config = _read(path)
    train = train_config_from_section(config[TRAIN_SECTION]) if TRAIN_SECTION in config else TrainConfig()
    if PATHS_SECTION not in config or 'scene' not in config[PATHS_SECTION]:
        raise ConfigError(f'{path} needs a [{PATHS_SECTION}] section with a scene entry')
    paths = config[PATHS_SECTION]
    unknown = sorted(set(paths.keys()) - {'scene', 'output', 'init_gaussians'})
    if unknown:
        raise ConfigError(f'Unknown keys in [{PATHS_SECTION}]: {", ".join(unknown)}')

    base = path.parent
    scene_dir = base / paths['scene']
    if not scene_dir.is_dir():
        raise ConfigError(f'Scene directory {scene_dir} does not exist')
    init_gaussians = None
    if paths.get('init_gaussians', '').strip():
        init_gaussians = base / paths['init_gaussians']
        if not init_gaussians.is_file():
            raise ConfigError(f'Initial Gaussians {init_gaussians} do not exist')
    output_dir = base / paths.get('output', 'run')
    return RunConfig(train=train, scene_dir=scene_dir, output_dir=output_dir, init_gaussians=init_gaussians)


def save_run_config(run: RunConfig, path: Path, relative_to: Optional[Path] = None):
    """
    Write a run config; paths are stored relative to `relative_to` when given.
    """
    def _rel(p: Path) -> str:
        if relative_to is None:
            return str(p)
        try:
            return str(Path(p).relative_to(relative_to))
        except ValueError:
            return str(p)

    config = configparser.ConfigParser()
    config[TRAIN_SECTION] = _to_section(run.train)
    config[PATHS_SECTION] = {
        'scene': _rel(run.scene_dir),
        'output': _rel(run.output_dir),
        'init_gaussians': _rel(run.init_gaussians) if run.init_gaussians else '',
    }
    _write(config, path, 'eigensplat training run')
