"""
Reading and writing point clouds, images and camera files.
"""
import configparser
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from .errors import ConfigError, DimensionMismatchError, PlyFormatError
from .gaussians import sigmoid
from .neighborhood import PointCloud
from .renderer import Camera


logger = logging.getLogger('eigensplat')

IMAGE_FORMATS: dict[str, str] = {
    '.ppm': 'PPM',
    '.png': 'PNG',
}


def _vertex(path: Path):
    try:
        plydata = PlyData.read(str(path))
    except (PlyParseError, ValueError) as err:
        raise PlyFormatError(f'Cannot parse PLY {path}: {err}') from err
    try:
        vertex = plydata['vertex']
    except KeyError as err:
        raise PlyFormatError(f'{path} has no vertex element') from err
    names = {prop.name for prop in vertex.properties}
    missing = [name for name in ('x', 'y', 'z') if name not in names]
    if missing:
        raise PlyFormatError(f'{path} is missing vertex properties: {", ".join(missing)}')
    return vertex, names


def read_point_cloud(path: Path, min_opacity: float = 0.0) -> PointCloud:
    """
    Load vertex positions from an ASCII or binary PLY. Gaussian PLYs are accepted
    too; with min_opacity > 0 their vertices whose activated opacity falls
    below it are dropped.
    :param path:
    :param min_opacity:
    :return:
    """
    vertex, names = _vertex(path)
    positions = np.stack([np.asarray(vertex[axis], dtype=np.float64) for axis in ('x', 'y', 'z')], axis=1)
    if min_opacity > 0.0:
        if 'opacity' not in names:
            raise PlyFormatError(f'{path} has no opacity property to filter on')
        keep = sigmoid(np.asarray(vertex['opacity'], dtype=np.float64)) >= min_opacity
        logger.info(f'Opacity filter {min_opacity} keeps {int(keep.sum())} of {keep.size} points')
        positions = positions[keep]
    return PointCloud(positions)


def write_point_cloud(pc: PointCloud, path: Path, colors: Optional[np.ndarray] = None, text: bool = True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = [('x', 'f8'), ('y', 'f8'), ('z', 'f8')]
    if colors is not None:
        dtype += [('red', 'u1'), ('green', 'u1'), ('blue', 'u1')]
    vertices = np.empty(len(pc), dtype=dtype)
    vertices['x'] = pc.positions[:, 0]
    vertices['y'] = pc.positions[:, 1]
    vertices['z'] = pc.positions[:, 2]
    if colors is not None:
        quantized = to_bytes(colors)
        vertices['red'] = quantized[:, 0]
        vertices['green'] = quantized[:, 1]
        vertices['blue'] = quantized[:, 2]
    PlyData([PlyElement.describe(vertices, 'vertex')], text=text).write(str(path))
    logger.debug(f'Wrote {len(pc)} points to {path}')


def to_bytes(values: np.ndarray) -> np.ndarray:
    """
    8-bit quantization of [0, 1] floats.
    """
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(image: np.ndarray, path: Path):
    """
    Write an RGB float image as binary PPM (P6) or PNG, chosen by suffix.
    """
    path = Path(path)
    image_format = IMAGE_FORMATS.get(path.suffix.lower())
    if image_format is None:
        raise ConfigError(f'Unsupported image format {path.suffix!r}, use .ppm or .png')
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatchError(f'Expected an RGB image, got shape {image.shape}')
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(image)).save(path, format=image_format)
    logger.debug(f'Wrote image {path}')


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0


def camera_to_section(cam: Camera) -> dict[str, str]:
    return {
        'fx': repr(float(cam.fx)),
        'fy': repr(float(cam.fy)),
        'cx': repr(float(cam.cx)),
        'cy': repr(float(cam.cy)),
        'width': repr(cam.width),
        'height': repr(cam.height),
        'rotation': repr([float(v) for v in cam.rotation.ravel()]),
        'translation': repr([float(v) for v in cam.translation]),
    }


def camera_from_section(section: configparser.SectionProxy) -> Camera:
    try:
        return Camera(
            fx=float(section['fx']),
            fy=float(section['fy']),
            cx=float(section['cx']),
            cy=float(section['cy']),
            width=int(section['width']),
            height=int(section['height']),
            rotation=np.array(_floats(section['rotation'])).reshape(3, 3),
            translation=np.array(_floats(section['translation'])),
        )
    except (KeyError, ValueError) as err:
        raise ConfigError(f'Malformed camera [{section.name}]: {err}') from err


def _floats(raw: str) -> list[float]:
    return [float(item) for item in raw.strip().strip('[]').split(',') if item.strip()]


def save_cameras(cameras: list[Camera], path: Path):
    config = configparser.ConfigParser()
    for i, cam in enumerate(cameras):
        config[f'camera_{i:03d}'] = camera_to_section(cam)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open(mode='w') as camera_file:
        camera_file.write('# eigensplat cameras: world-to-camera rotation (row-major) and translation\n')
        config.write(camera_file)
    logger.debug(f'Wrote {len(cameras)} cameras to {path}')


def load_cameras(path: Path) -> list[Camera]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'Camera file {path} does not exist')
    config = configparser.ConfigParser()
    try:
        config.read(path)
    except configparser.Error as err:
        raise ConfigError(f'Malformed camera file {path}: {err}') from err
    cameras = [camera_from_section(config[name]) for name in config.sections()]
    if not cameras:
        raise ConfigError(f'{path} holds no cameras')
    return cameras
