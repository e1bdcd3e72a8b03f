"""
Gaussian primitives: parameter storage with gradient buffers, activations,
world covariance assembly and the per-Gaussian planarity loss.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
from plyfile import PlyData, PlyElement

from .constants import MAX_OPACITY, MIN_OPACITY, MIN_SCALE_FRACTION
from .errors import InvalidInputError, PlyFormatError
from .features import planarity_loss
from .linalg3 import SymMat3, normalization_vjp, normalize_eigenvalues

if TYPE_CHECKING:
    from .neighborhood import PointCloud
    from .renderer import Camera


logger = logging.getLogger('eigensplat')

PARAMETER_NAMES: tuple[str, ...] = ('means', 'log_scales', 'rotations', 'opacity_logits', 'colors')
PLY_PROPERTIES: list[str] = [
    'x', 'y', 'z',
    'scale_0', 'scale_1', 'scale_2',
    'rot_0', 'rot_1', 'rot_2', 'rot_3',
    'opacity',
    'red', 'green', 'blue',
]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """
    Rotation matrices from (w, x, y, z) quaternions; the input is normalized first.
    :param q: (N, 4)
    :return: (N, 3, 3)
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def rotation_vjp(q: np.ndarray, grad_rotation: np.ndarray) -> np.ndarray:
    """
    Gradient with respect to the raw (unnormalized) quaternion given dL/dR.
    :param q: (N, 4)
    :param grad_rotation: (N, 3, 3)
    :return: (N, 4)
    """
    q = np.asarray(q, dtype=np.float64)
    length = np.linalg.norm(q, axis=-1, keepdims=True)
    unit = q / length
    w, x, y, z = unit[..., 0], unit[..., 1], unit[..., 2], unit[..., 3]
    g = grad_rotation
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    grad_unit = 2.0 * np.stack([
        -g01 * z + g02 * y + g10 * z - g12 * x - g20 * y + g21 * x,
        g01 * y + g02 * z + g10 * y - 2 * g11 * x - g12 * w + g20 * z + g21 * w - 2 * g22 * x,
        -2 * g00 * y + g01 * x + g02 * w + g10 * x + g12 * z - g20 * w + g21 * z - 2 * g22 * y,
        -2 * g00 * z - g01 * w + g02 * x + g10 * w - 2 * g11 * z + g12 * y + g20 * x + g21 * y,
    ], axis=-1)
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / length


@dataclass
class GaussianSet:
    """
    Structure of arrays for N Gaussians plus a gradient buffer per field.
    Rotations are (w, x, y, z) quaternions, colors plain RGB in [0, 1].
    """
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if not self.grads:
            self.zero_grad()

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_points(
            cls,
            positions: np.ndarray,
            colors: np.ndarray,
            scales: np.ndarray,
            opacity: float = 0.1
    ) -> GaussianSet:
        """
        Isotropic, axis-aligned Gaussians centered on the given points.
        :param positions: (N, 3)
        :param colors: (N, 3)
        :param scales: (N,) isotropic standard deviations
        :param opacity: initial activated opacity
        :return:
        """
        n = np.asarray(positions).reshape(-1, 3).shape[0]
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            means=positions,
            log_scales=np.repeat(np.log(np.asarray(scales, dtype=np.float64)).reshape(n, 1), 3, axis=1),
            rotations=rotations,
            opacity_logits=np.full(n, float(inverse_sigmoid(opacity))),
            colors=np.clip(colors, 0.0, 1.0),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def zero_grad(self):
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in PARAMETER_NAMES}

    def copy(self) -> GaussianSet:
        return GaussianSet(
            **{name: getattr(self, name).copy() for name in PARAMETER_NAMES},
            grads={name: grad.copy() for name, grad in self.grads.items()},
        )

    def select(self, keep: np.ndarray) -> GaussianSet:
        """
        Subset by boolean mask or index array; gradient buffers follow.
        """
        return GaussianSet(
            **{name: getattr(self, name)[keep] for name in PARAMETER_NAMES},
            grads={name: grad[keep] for name, grad in self.grads.items()},
        )

    def extend(self, other: GaussianSet) -> GaussianSet:
        return GaussianSet(
            **{name: np.concatenate([getattr(self, name), getattr(other, name)]) for name in PARAMETER_NAMES},
            grads={name: np.concatenate([self.grads[name], other.grads[name]]) for name in PARAMETER_NAMES},
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def rotation_matrices(self) -> np.ndarray:
        return quaternion_to_rotation(self.rotations)

    def covariances(self) -> np.ndarray:
        """
        R diag(s^2) R^T for every Gaussian, shape (N, 3, 3).
        """
        rotation = self.rotation_matrices()
        scaled = rotation * self.scales[:, None, :]
        return np.einsum('nik,njk->nij', scaled, scaled)

    def world_covariance(self, g: int) -> SymMat3:
        if not 0 <= g < len(self):
            raise InvalidInputError(f'Gaussian id {g} out of range for {len(self)} Gaussians')
        return SymMat3.from_dense(self.select(np.array([g])).covariances()[0])

    def covariance_vjp(
            self,
            grad_covariance: np.ndarray,
            ids: Optional[np.ndarray] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """
        Pull dL/dSigma back to log-scales and raw quaternions.
        :param grad_covariance: (M, 3, 3) symmetric gradient
        :param ids: the Gaussians the rows refer to, all of them when omitted
        :return: gradient w.r.t. log_scales (M, 3) and rotations (M, 4)
        """
        quaternions = self.rotations if ids is None else self.rotations[ids]
        log_scales = self.log_scales if ids is None else self.log_scales[ids]
        rotation = quaternion_to_rotation(quaternions)
        scales = np.exp(log_scales)
        scaled = rotation * scales[:, None, :]
        grad_scaled = 2.0 * np.einsum('nij,njk->nik', grad_covariance, scaled)
        grad_scales = np.einsum('nak,nak->nk', grad_scaled, rotation)
        grad_rotation = grad_scaled * scales[:, None, :]
        return grad_scales * scales, rotation_vjp(quaternions, grad_rotation)

    def save_ply(self, path: Path, text: bool = True):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        attributes = np.concatenate([
            self.means,
            self.log_scales,
            self.rotations,
            self.opacity_logits[:, None],
            self.colors,
        ], axis=1)
        elements = np.empty(len(self), dtype=[(name, 'f8') for name in PLY_PROPERTIES])
        elements[:] = list(map(tuple, attributes))
        PlyData([PlyElement.describe(elements, 'vertex')], text=text).write(str(path))
        logger.debug(f'Wrote {len(self)} Gaussians to {path}')

    @classmethod
    def load_ply(cls, path: Path) -> GaussianSet:
        plydata = PlyData.read(str(path))
        try:
            vertex = plydata['vertex']
        except KeyError as err:
            raise PlyFormatError(f'{path} has no vertex element') from err
        names = {prop.name for prop in vertex.properties}
        missing = [name for name in PLY_PROPERTIES if name not in names]
        if missing:
            raise PlyFormatError(f'{path} is missing Gaussian properties: {", ".join(missing)}')
        column = {name: np.asarray(vertex[name], dtype=np.float64) for name in PLY_PROPERTIES}
        return cls(
            means=np.stack([column['x'], column['y'], column['z']], axis=1),
            log_scales=np.stack([column[f'scale_{i}'] for i in range(3)], axis=1),
            rotations=np.stack([column[f'rot_{i}'] for i in range(4)], axis=1),
            opacity_logits=column['opacity'],
            colors=np.stack([column['red'], column['green'], column['blue']], axis=1),
        )


@dataclass
class SceneBundle:
    gaussians: GaussianSet
    cameras: list[Camera]
    images: list[np.ndarray]
    reference: Optional[PointCloud] = None
    extent: float = 1.0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise InvalidInputError(f'{len(self.cameras)} cameras but {len(self.images)} images')
        sizes = {(cam.height, cam.width) for cam in self.cameras}
        if len(sizes) > 1:
            raise InvalidInputError(f'Cameras disagree on image size: {sorted(sizes)}')
        for camera, image in zip(self.cameras, self.images):
            if image.shape != (camera.height, camera.width, 3):
                raise InvalidInputError(f'Image shape {image.shape} does not match camera')


def gaussian_planarity_loss(
        gaussians: GaussianSet,
        squared: bool = False,
        weight: float = 1.0
) -> tuple[float, np.ndarray]:
    """
    Mean of 1 - (s'2 - s'3) / s'1 over Gaussians, with s the activated scales
    sorted descending (or their squares) and normalized by their sum.
    The weighted gradient is added into the log_scales buffer.
    :param gaussians:
    :param squared: use covariance eigenvalues s^2 instead of scales
    :param weight: factor applied to the accumulated gradient
    :return: loss and its (unweighted) gradient w.r.t. log_scales
    """
    n = len(gaussians)
    if n == 0:
        raise InvalidInputError('Planarity loss needs at least one Gaussian')
    shape_values = np.exp(2.0 * gaussians.log_scales) if squared else gaussians.scales
    # Stable sort keeps the lower axis first on ties.
    order = np.argsort(-shape_values, axis=1, kind='stable')
    ordered = np.take_along_axis(shape_values, order, axis=1)
    normalized = normalize_eigenvalues(ordered)
    feature = planarity_loss(normalized)
    loss = float(np.mean(feature.value))

    grad_ordered = normalization_vjp(ordered, normalized, feature.gradient) / n
    grad_values = np.zeros_like(grad_ordered)
    np.put_along_axis(grad_values, order, grad_ordered, axis=1)
    grad_log = grad_values * shape_values * (2.0 if squared else 1.0)
    gaussians.grads['log_scales'] += weight * grad_log
    return loss, grad_log


def clamp_parameters(gaussians: GaussianSet, extent: float) -> GaussianSet:
    """
    Renormalize quaternions and keep scales and opacities inside their valid ranges.
    :param gaussians: modified in place
    :param extent: scene extent used for the scale bounds
    :return: the same set
    """
    length = np.linalg.norm(gaussians.rotations, axis=1, keepdims=True)
    bad = (length[:, 0] <= 0.0) | ~np.isfinite(length[:, 0])
    gaussians.rotations = np.where(length > 0.0, gaussians.rotations / np.where(length > 0.0, length, 1.0), 0.0)
    gaussians.rotations[bad] = np.array([1.0, 0.0, 0.0, 0.0])

    gaussians.log_scales = np.clip(
        gaussians.log_scales,
        np.log(MIN_SCALE_FRACTION * extent),
        np.log(extent),
    )
    gaussians.opacity_logits = np.clip(
        gaussians.opacity_logits,
        float(inverse_sigmoid(MIN_OPACITY)),
        float(inverse_sigmoid(MAX_OPACITY)),
    )
    return gaussians
