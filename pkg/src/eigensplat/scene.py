"""
Synthetic desk-scale scenes: textured quads seen from a ring of cameras.

Ground-truth images are ray cast analytically against the quads, so the
renderer being trained never produces its own targets. The reference cloud is
sampled uniformly by area on the same quads and the initial Gaussians are a
noisy subset of it, much like an SfM cloud.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .config import SceneSpec, load_scene_spec, save_scene_spec
from .constants import \
    CAMERAS_FILE, \
    IMAGE_DIR, \
    INIT_GAUSSIANS_FILE, \
    NEAR_PLANE, \
    REFERENCE_FILE, \
    SCENE_SPEC_FILE
from .errors import ConfigError, InvalidSceneSpecError
from .gaussians import GaussianSet, SceneBundle
from .neighborhood import PointCloud
from .renderer import Camera
from .storage import \
    load_cameras, \
    read_image, \
    read_point_cloud, \
    save_cameras, \
    write_image, \
    write_point_cloud


logger = logging.getLogger('eigensplat')

# Face tints for the box scenes, one per side.
FACE_COLORS: list[tuple[float, float, float]] = [
    (0.85, 0.25, 0.2),
    (0.25, 0.7, 0.3),
    (0.2, 0.35, 0.85),
    (0.9, 0.75, 0.2),
    (0.7, 0.3, 0.75),
]
SHADE = 0.45


@dataclass
class Quad:
    """
    Parallelogram origin + a*u + b*v for a, b in [0, 1] with a checker texture.
    """
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    color_a: np.ndarray
    color_b: np.ndarray
    period: int

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    def texture(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        cell = (np.floor(a * self.period).astype(np.int64) + np.floor(b * self.period).astype(np.int64)) % 2
        return np.where(cell[:, None] == 0, self.color_a, self.color_b)

    def point(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.origin + a[:, None] * self.u + b[:, None] * self.v


@dataclass
class SyntheticScene:
    spec: SceneSpec
    bundle: SceneBundle
    reference_colors: np.ndarray


def scene_quads(spec: SceneSpec) -> list[Quad]:
    """
    Surfaces of the scene, centered on the origin with z up.
    """
    e = spec.extent
    h = e / 2.0
    a = np.asarray(spec.color_a, dtype=np.float64)
    b = np.asarray(spec.color_b, dtype=np.float64)
    x, y, z = np.eye(3) * e

    match spec.kind:
        case 'plane':
            return [Quad(np.array([-h, -h, 0.0]), x, y, a, b, spec.checker_period)]
        case 'manhattan-corner':
            return [
                Quad(np.array([-h, -h, 0.0]), x, y, a, b, spec.checker_period),
                Quad(np.array([-h, -h, 0.0]), y, z, b, a, spec.checker_period),
                Quad(np.array([-h, -h, 0.0]), z, x, a * SHADE + b * (1 - SHADE), a, spec.checker_period),
            ]
        case 'box' | 'textured-cube':
            # Open at the bottom: the camera ring never sees it.
            faces = [
                (np.array([-h, -h, h]), x, y),
                (np.array([-h, -h, -h]), z, x),
                (np.array([h, -h, -h]), z, y),
                (np.array([-h, h, -h]), x, z),
                (np.array([-h, -h, -h]), y, z),
            ]
            quads = []
            for (origin, u, v), tint in zip(faces, FACE_COLORS):
                tint = np.asarray(tint)
                if spec.kind == 'box':
                    quads.append(Quad(origin, u, v, tint, tint, 1))
                else:
                    quads.append(Quad(origin, u, v, tint, tint * SHADE, spec.checker_period))
            return quads
        case _:
            raise InvalidSceneSpecError(f'Unknown scene kind {spec.kind!r}')


def camera_ring(spec: SceneSpec) -> list[Camera]:
    cameras = []
    elevation = np.radians(spec.camera_elevation)
    target = np.zeros(3)
    for i in range(spec.camera_count):
        azimuth = 2.0 * np.pi * i / spec.camera_count
        eye = spec.camera_radius * np.array([
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ])
        cameras.append(Camera.look_at(eye, target, np.array([0.0, 0.0, 1.0]), spec.fov,
                                      spec.image_size, spec.image_size))
    return cameras


def ray_cast(quads: list[Quad], cam: Camera, background: np.ndarray, supersample: int = 1) -> np.ndarray:
    """
    Analytic image of the quads: nearest hit per ray, box-filtered over
    supersample x supersample rays per pixel.
    :param quads:
    :param cam:
    :param background:
    :param supersample:
    :return: (height, width, 3) image in [0, 1]
    """
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    xs = (np.arange(cam.width)[:, None] + offsets[None, :]).ravel()
    ys = (np.arange(cam.height)[:, None] + offsets[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    directions_cam = np.stack([
        (px.ravel() - cam.cx) / cam.fx,
        (py.ravel() - cam.cy) / cam.fy,
        np.ones(px.size),
    ], axis=1)
    directions = directions_cam @ cam.rotation
    origin = cam.center

    nearest = np.full(px.size, np.inf)
    color = np.broadcast_to(background, (px.size, 3)).copy()
    for quad in quads:
        normal = quad.normal
        facing = directions @ normal
        with np.errstate(divide='ignore', invalid='ignore'):
            t = ((quad.origin - origin) @ normal) / facing
            rel = origin - quad.origin + t[:, None] * directions
        # Coordinates along u and v through the dual basis of the parallelogram.
        gram = np.array([[quad.u @ quad.u, quad.u @ quad.v], [quad.u @ quad.v, quad.v @ quad.v]])
        ab = np.linalg.solve(gram, np.stack([rel @ quad.u, rel @ quad.v])).T
        a, b = ab[:, 0], ab[:, 1]
        hit = (np.abs(facing) > 1e-12) & (t > NEAR_PLANE) & (t < nearest) \
            & (a >= 0.0) & (a <= 1.0) & (b >= 0.0) & (b <= 1.0)
        if np.any(hit):
            nearest[hit] = t[hit]
            color[hit] = quad.texture(a[hit], b[hit])

    s = supersample
    image = color.reshape(cam.height, s, cam.width, s, 3).mean(axis=(1, 3))
    return np.clip(image, 0.0, 1.0)


def sample_surface(quads: list[Quad], count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Points uniform by area over the quads, with their texture colors.
    """
    areas = np.array([quad.area for quad in quads])
    owner = rng.choice(len(quads), size=count, p=areas / areas.sum())
    a = rng.random(count)
    b = rng.random(count)
    points = np.empty((count, 3))
    colors = np.empty((count, 3))
    for i, quad in enumerate(quads):
        mask = owner == i
        points[mask] = quad.point(a[mask], b[mask])
        colors[mask] = quad.texture(a[mask], b[mask])
    return points, colors


def mean_neighbor_spacing(points: np.ndarray, neighbors: int = 3) -> np.ndarray:
    """
    Mean distance of every point to its nearest few other points.
    """
    k = min(neighbors + 1, points.shape[0])
    distances, _ = cKDTree(points).query(points, k=k)
    return np.asarray(distances).reshape(points.shape[0], k)[:, 1:].mean(axis=1)


def initial_gaussians(
        spec: SceneSpec,
        reference: np.ndarray,
        reference_colors: np.ndarray,
        rng: np.random.Generator
) -> GaussianSet:
    """
    Noisy subset of the reference samples plus uniform outliers in the padded
    bounding box. Scales follow the local point spacing.
    """
    outliers = int(round(spec.outlier_fraction * spec.init_points))
    surface = spec.init_points - outliers
    pick = rng.choice(reference.shape[0], size=surface, replace=surface > reference.shape[0])
    pick.sort()
    positions = reference[pick] + rng.normal(0.0, spec.init_noise, size=(surface, 3))
    colors = reference_colors[pick]
    if outliers:
        low = reference.min(axis=0) - 0.25 * spec.extent
        high = reference.max(axis=0) + 0.25 * spec.extent
        positions = np.concatenate([positions, rng.uniform(low, high, size=(outliers, 3))])
        colors = np.concatenate([colors, rng.random((outliers, 3))])
    spacing = np.maximum(mean_neighbor_spacing(positions), 1e-3 * spec.extent)
    return GaussianSet.from_points(positions, colors, spacing)


def synth_scene(spec: SceneSpec) -> SyntheticScene:
    """
    Build the cameras, ground-truth images, reference cloud and initial
    Gaussians of a synthetic scene. The same spec always gives the same scene.
    :param spec:
    :return:
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    quads = scene_quads(spec)
    cameras = camera_ring(spec)
    background = np.asarray(spec.background, dtype=np.float64)
    images = [ray_cast(quads, cam, background, spec.supersample) for cam in cameras]
    reference, reference_colors = sample_surface(quads, spec.surface_samples, rng)
    gaussians = initial_gaussians(spec, reference, reference_colors, rng)
    logger.info(
        f'Synthesized {spec.kind} scene: {len(cameras)} views at {spec.image_size}px, '
        f'{reference.shape[0]} reference points, {len(gaussians)} initial Gaussians'
    )
    bundle = SceneBundle(
        gaussians=gaussians,
        cameras=cameras,
        images=images,
        reference=PointCloud(reference),
        extent=spec.extent,
        background=background,
    )
    return SyntheticScene(spec, bundle, reference_colors)


def image_path(scene_dir: Path, index: int) -> Path:
    return Path(scene_dir) / IMAGE_DIR / f'view_{index:03d}.ppm'


def write_scene(scene: SyntheticScene, out_dir: Path):
    """
    Scene directory layout: scene.cfg, cameras.cfg, images/view_NNN.ppm,
    reference.ply and init_gaussians.ply.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = scene.bundle
    save_scene_spec(scene.spec, out_dir / SCENE_SPEC_FILE)
    save_cameras(bundle.cameras, out_dir / CAMERAS_FILE)
    for i, image in enumerate(bundle.images):
        write_image(image, image_path(out_dir, i))
    write_point_cloud(bundle.reference, out_dir / REFERENCE_FILE, colors=scene.reference_colors)
    bundle.gaussians.save_ply(out_dir / INIT_GAUSSIANS_FILE)
    logger.info(f'Wrote scene to {out_dir}')


def load_scene(scene_dir: Path, init_gaussians: Optional[Path] = None) -> SceneBundle:
    """
    Read a scene directory written by write_scene. Images come back 8-bit
    quantized; the reference cloud is optional.
    :param scene_dir:
    :param init_gaussians: Gaussian PLY to start from instead of the scene's own
    :return:
    """
    scene_dir = Path(scene_dir)
    cameras = load_cameras(scene_dir / CAMERAS_FILE)
    images = []
    for i in range(len(cameras)):
        path = image_path(scene_dir, i)
        if not path.is_file():
            raise ConfigError(f'Missing ground-truth image {path}')
        images.append(read_image(path))
    reference = None
    if (scene_dir / REFERENCE_FILE).is_file():
        reference = read_point_cloud(scene_dir / REFERENCE_FILE)

    background = np.zeros(3)
    if (scene_dir / SCENE_SPEC_FILE).is_file():
        spec = load_scene_spec(scene_dir / SCENE_SPEC_FILE)
        extent = spec.extent
        background = np.asarray(spec.background, dtype=np.float64)
    elif reference is not None and len(reference):
        extent = reference.extent
    else:
        raise ConfigError(f'{scene_dir} has neither {SCENE_SPEC_FILE} nor a reference cloud to size the scene')

    gaussians_path = Path(init_gaussians) if init_gaussians else scene_dir / INIT_GAUSSIANS_FILE
    if not gaussians_path.is_file():
        raise ConfigError(f'Initial Gaussians {gaussians_path} do not exist')
    gaussians = GaussianSet.load_ply(gaussians_path)
    logger.info(f'Loaded scene {scene_dir}: {len(cameras)} views, {len(gaussians)} Gaussians')
    return SceneBundle(
        gaussians=gaussians,
        cameras=cameras,
        images=images,
        reference=reference,
        extent=extent,
        background=background,
    )
