import numpy as np
import pytest

from eigensplat.config import SceneSpec, TrainConfig
from eigensplat.gaussians import GaussianSet, inverse_sigmoid
from eigensplat.renderer import Camera
from eigensplat.scene import synth_scene


def random_psd(rng: np.random.Generator, count: int) -> np.ndarray:
    a = rng.normal(size=(count, 3, 3))
    return a @ a.transpose(0, 2, 1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def central_difference(f, x: np.ndarray, h: float, indices=None) -> np.ndarray:
    """
    Numerical gradient of scalar f at x (modified and restored in place).
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        saved = flat[i]
        flat[i] = saved + h
        plus = f()
        flat[i] = saved - h
        minus = f()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def axis_camera(size: int = 32, focal: float = 40.0) -> Camera:
    """
    Camera at the origin looking down +z, principal point on the image center.
    """
    return Camera(
        fx=focal,
        fy=focal,
        cx=size / 2.0,
        cy=size / 2.0,
        rotation=np.eye(3),
        translation=np.zeros(3),
        width=size,
        height=size,
    )


def make_gaussians(
        means,
        scales,
        opacities,
        colors,
        rotations=None
) -> GaussianSet:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = means.shape[0]
    if rotations is None:
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianSet(
        means=means,
        log_scales=np.log(np.asarray(scales, dtype=np.float64).reshape(n, 3)),
        rotations=rotations,
        opacity_logits=inverse_sigmoid(np.asarray(opacities, dtype=np.float64).reshape(n)),
        colors=np.asarray(colors, dtype=np.float64).reshape(n, 3),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_spec() -> SceneSpec:
    return SceneSpec(
        kind='plane',
        extent=10.0,
        checker_period=2,
        camera_count=4,
        camera_radius=18.0,
        camera_elevation=40.0,
        fov=50.0,
        image_size=16,
        supersample=1,
        surface_samples=300,
        init_points=120,
        init_noise=0.2,
        seed=5,
    )


@pytest.fixture
def tiny_scene(tiny_spec):
    return synth_scene(tiny_spec)


@pytest.fixture
def quick_config() -> TrainConfig:
    return TrainConfig(
        max_iterations=20,
        log_interval=10,
        k=8,
        knn_refresh=10,
        densify_from=5,
        densify_interval=5,
        checkpoint_interval=0,
        progress=False,
        seed=7,
    )
