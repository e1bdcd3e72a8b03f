"""
Differentiable splatting at desk scale.

Gaussians are projected to screen space with the local affine (EWA)
approximation, sorted globally by depth and alpha-composited front to back.
Compositing is evaluated over (splat, pixel) pairs in one vectorized pass; the
backward pass re-runs that pass and walks the same pairs to distribute the
image gradient back to every Gaussian parameter.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .constants import \
    DSSIM_WEIGHT, \
    MIN_TRANSMITTANCE, \
    NEAR_PLANE, \
    SCREEN_DILATION, \
    TRUNCATION_SIGMAS
from .errors import DimensionMismatchError, InvalidInputError
from .gaussians import GaussianSet
from .metrics import ssim_and_grad


logger = logging.getLogger('eigensplat')


@dataclass
class Camera:
    """
    Pinhole camera. rotation/translation map world to camera coordinates
    (x right, y down, z forward); pixel centers sit at integer coordinates.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f'Focal lengths must be positive, got fx={self.fx}, fy={self.fy}')
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(f'Image size must be positive, got {self.width}x{self.height}')
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-8, rtol=0.0):
            raise InvalidInputError('Camera rotation is not orthonormal')

    @classmethod
    def look_at(
            cls,
            eye: np.ndarray,
            target: np.ndarray,
            up: np.ndarray,
            fov_degrees: float,
            width: int,
            height: int
    ) -> 'Camera':
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        focal = 0.5 * width / np.tan(np.radians(fov_degrees) / 2.0)
        return cls(
            fx=focal,
            fy=focal,
            cx=width / 2.0,
            cy=height / 2.0,
            rotation=rotation,
            translation=-rotation @ eye,
            width=width,
            height=height,
        )

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class Splat2D:
    """
    Screen-space splats of the Gaussians in front of the near plane, one row per
    visible Gaussian (`ids` points back into the GaussianSet). Camera-space
    intermediates are kept for the backward pass.
    """
    ids: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    cam_points: np.ndarray
    jacobians: np.ndarray
    cov3d: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass
class _Pairs:
    """
    Splat/pixel pairs inside each splat's truncation ellipse, sorted by pixel
    and then by depth.
    """
    splat: np.ndarray
    pixel: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    density: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    final_transmittance: np.ndarray


@dataclass
class BackwardResult:
    """
    Per-Gaussian norm of the loss gradient w.r.t. the projected mean, in
    normalized device units, and the visibility mask of this view.
    """
    viewspace_grad_norm: np.ndarray
    visible: np.ndarray


def project(gaussians: GaussianSet, cam: Camera) -> Splat2D:
    """
    Project every Gaussian in front of the near plane.
    :param gaussians:
    :param cam:
    :return:
    """
    cam_points = gaussians.means @ cam.rotation.T + cam.translation
    ids = np.flatnonzero(cam_points[:, 2] > NEAR_PLANE)
    t = cam_points[ids]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    means2d = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)

    jacobians = np.zeros((ids.size, 2, 3))
    jacobians[:, 0, 0] = cam.fx / tz
    jacobians[:, 0, 2] = -cam.fx * tx / (tz * tz)
    jacobians[:, 1, 1] = cam.fy / tz
    jacobians[:, 1, 2] = -cam.fy * ty / (tz * tz)

    cov3d = gaussians.covariances()[ids]
    transform = jacobians @ cam.rotation
    cov2d = transform @ cov3d @ transform.transpose(0, 2, 1) + SCREEN_DILATION * np.eye(2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    logger.debug(f'Projected {ids.size} of {len(gaussians)} Gaussians in front of the near plane')

    return Splat2D(
        ids=ids,
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=tz,
        colors=gaussians.colors[ids],
        opacities=gaussians.opacities[ids],
        cam_points=t,
        jacobians=jacobians,
        cov3d=cov3d,
    )


def _depth_rank(splats: Splat2D) -> np.ndarray:
    order = np.lexsort((splats.ids, splats.depths))
    rank = np.empty(len(splats), dtype=np.int64)
    rank[order] = np.arange(len(splats))
    return rank


def _segment_cumsum(values: np.ndarray, starts: np.ndarray, segment: np.ndarray) -> np.ndarray:
    """
    Inclusive cumulative sum restarted at every segment start.
    """
    total = np.cumsum(values, axis=0)
    base = total[starts] - values[starts]
    return total - base[segment]


def _build_pairs(splats: Splat2D, cam: Camera) -> _Pairs:
    n_pixels = cam.width * cam.height
    empty = np.zeros(0)
    if len(splats) == 0:
        return _Pairs(empty.astype(np.int64), empty.astype(np.int64), empty, empty, empty, empty, empty,
                      np.ones(n_pixels))

    a, b, c = splats.cov2d[:, 0, 0], splats.cov2d[:, 0, 1], splats.cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    largest = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    radius = TRUNCATION_SIGMAS * np.sqrt(largest)
    mx, my = splats.means2d[:, 0], splats.means2d[:, 1]
    finite = np.isfinite(mx) & np.isfinite(my) & np.isfinite(radius)
    x0 = np.clip(np.ceil(np.where(finite, mx - radius, 0.0)), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(np.where(finite, mx + radius, -1.0)) + 1, 0, cam.width).astype(np.int64)
    y0 = np.clip(np.ceil(np.where(finite, my - radius, 0.0)), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(np.where(finite, my + radius, -1.0)) + 1, 0, cam.height).astype(np.int64)
    widths = np.maximum(x1 - x0, 0)
    heights = np.maximum(y1 - y0, 0)
    counts = widths * heights
    total = int(counts.sum())
    if total == 0:
        return _Pairs(empty.astype(np.int64), empty.astype(np.int64), empty, empty, empty, empty, empty,
                      np.ones(n_pixels))

    splat = np.repeat(np.arange(len(splats)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[splat] + local % widths[splat]
    py = y0[splat] + local // widths[splat]
    dx = px - mx[splat]
    dy = py - my[splat]
    q00, q01, q11 = splats.conics[splat, 0], splats.conics[splat, 1], splats.conics[splat, 2]
    power = q00 * dx * dx + 2.0 * q01 * dx * dy + q11 * dy * dy
    inside = power <= TRUNCATION_SIGMAS * TRUNCATION_SIGMAS

    splat, px, py, dx, dy, power = (arr[inside] for arr in (splat, px, py, dx, dy, power))
    pixel = py * cam.width + px
    key = pixel * len(splats) + _depth_rank(splats)[splat]
    order = np.argsort(key, kind='stable')
    splat, pixel, dx, dy, power = (arr[order] for arr in (splat, pixel, dx, dy, power))

    density = np.exp(-0.5 * power)
    alpha = splats.opacities[splat] * density
    if pixel.size == 0:
        return _Pairs(splat, pixel, dx, dy, density, alpha, empty, np.ones(n_pixels))

    starts = np.flatnonzero(np.r_[True, pixel[1:] != pixel[:-1]])
    segment = np.cumsum(np.r_[True, pixel[1:] != pixel[:-1]]) - 1
    log_keep = np.log1p(-alpha)
    transmittance = np.exp(_segment_cumsum(log_keep, starts, segment) - log_keep)

    # Early termination: pairs reached after transmittance fell below the floor do not contribute.
    alive = transmittance >= MIN_TRANSMITTANCE
    alpha = np.where(alive, alpha, 0.0)
    density = np.where(alive, density, 0.0)
    final = np.exp(np.bincount(pixel, weights=np.log1p(-alpha), minlength=n_pixels))
    return _Pairs(splat, pixel, dx, dy, density, alpha, transmittance, final)


def _background(background: Optional[np.ndarray]) -> np.ndarray:
    if background is None:
        return np.zeros(3)
    return np.asarray(background, dtype=np.float64).reshape(3)


def rasterize(splats: Splat2D, cam: Camera, background: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Front-to-back compositing of the projected splats.
    :param splats: output of project() for the same camera
    :param cam:
    :param background: RGB behind all splats, black by default
    :return: image of shape (height, width, 3)
    """
    background = _background(background)
    pairs = _build_pairs(splats, cam)
    n_pixels = cam.width * cam.height
    weight = pairs.alpha * pairs.transmittance
    image = np.stack([
        np.bincount(pairs.pixel, weights=weight * splats.colors[pairs.splat, ch], minlength=n_pixels)
        for ch in range(3)
    ], axis=1) if pairs.pixel.size else np.zeros((n_pixels, 3))
    image += pairs.final_transmittance[:, None] * background
    return image.reshape(cam.height, cam.width, 3)


def render(gaussians: GaussianSet, cam: Camera, background: Optional[np.ndarray] = None) -> np.ndarray:
    return rasterize(project(gaussians, cam), cam, background)


def photometric_loss(
        rendered: np.ndarray,
        truth: np.ndarray,
        theta: float = DSSIM_WEIGHT
) -> tuple[float, np.ndarray]:
    """
    (1 - theta) * L1 + theta * (1 - SSIM) / 2 and its gradient w.r.t. the rendered image.
    :param rendered:
    :param truth:
    :param theta: D-SSIM weight in [0, 1]
    :return:
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise DimensionMismatchError(f'Rendered {rendered.shape} and truth {truth.shape} differ')
    if not 0.0 <= theta <= 1.0:
        raise InvalidInputError(f'theta must lie in [0, 1], got {theta}')

    diff = rendered - truth
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - theta) * np.sign(diff) / diff.size
    loss = (1.0 - theta) * l1
    if theta > 0.0:
        ssim_value, ssim_grad = ssim_and_grad(rendered, truth)
        loss += theta * 0.5 * (1.0 - ssim_value)
        grad = grad - theta * 0.5 * ssim_grad
    return loss, grad


def backward(
        grad_image: np.ndarray,
        splats: Splat2D,
        gaussians: GaussianSet,
        cam: Camera,
        background: Optional[np.ndarray] = None,
        weight: float = 1.0
) -> BackwardResult:
    """
    Accumulate weight * dL/dparameters into the Gaussian gradient buffers.
    :param grad_image: dL/d(rendered image), shape (height, width, 3)
    :param splats: projection used for the forward pass
    :param gaussians:
    :param cam:
    :param background:
    :param weight: scale applied to the image gradient (loss weighting)
    :return: screen-space gradient statistics for densification
    """
    n = len(gaussians)
    result = BackwardResult(np.zeros(n), np.zeros(n, dtype=bool))
    result.visible[splats.ids] = True
    if len(splats) == 0:
        return result

    background = _background(background)
    pairs = _build_pairs(splats, cam)
    if pairs.pixel.size == 0:
        return result
    m = len(splats)
    g = (weight * np.asarray(grad_image, dtype=np.float64)).reshape(-1, 3)
    g_pair = g[pairs.pixel]
    colors = splats.colors[pairs.splat]
    contribution = pairs.alpha * pairs.transmittance

    # Light arriving from behind each pair: later splats plus the background.
    starts = np.flatnonzero(np.r_[True, pairs.pixel[1:] != pairs.pixel[:-1]])
    segment = np.cumsum(np.r_[True, pairs.pixel[1:] != pairs.pixel[:-1]]) - 1
    weighted = colors * contribution[:, None]
    inclusive = _segment_cumsum(weighted, starts, segment)
    per_pixel = np.zeros((cam.width * cam.height, 3))
    np.add.at(per_pixel, pairs.pixel, weighted)
    behind = per_pixel[pairs.pixel] - inclusive
    behind += pairs.final_transmittance[pairs.pixel, None] * background

    d_color_d_alpha = pairs.transmittance[:, None] * colors - behind / (1.0 - pairs.alpha)[:, None]
    alive = pairs.density > 0.0
    grad_alpha = np.where(alive, np.sum(g_pair * d_color_d_alpha, axis=1), 0.0)

    grad_colors = np.stack([
        np.bincount(pairs.splat, weights=g_pair[:, ch] * contribution, minlength=m) for ch in range(3)
    ], axis=1)
    grad_opacity = np.bincount(pairs.splat, weights=grad_alpha * pairs.density, minlength=m)

    # alpha = opacity * exp(-power / 2)
    grad_power = -0.5 * grad_alpha * splats.opacities[pairs.splat] * pairs.density
    dx, dy = pairs.dx, pairs.dy
    q00, q01, q11 = (splats.conics[pairs.splat, i] for i in range(3))
    grad_conic = np.stack([
        np.bincount(pairs.splat, weights=grad_power * dx * dx, minlength=m),
        np.bincount(pairs.splat, weights=grad_power * 2.0 * dx * dy, minlength=m),
        np.bincount(pairs.splat, weights=grad_power * dy * dy, minlength=m),
    ], axis=1)
    grad_mean2d = np.stack([
        np.bincount(pairs.splat, weights=-2.0 * grad_power * (q00 * dx + q01 * dy), minlength=m),
        np.bincount(pairs.splat, weights=-2.0 * grad_power * (q01 * dx + q11 * dy), minlength=m),
    ], axis=1)

    # conic = inverse(cov2d): dL/dcov = -Q G Q with G the symmetric conic gradient.
    conic = np.stack([
        np.stack([splats.conics[:, 0], splats.conics[:, 1]], axis=1),
        np.stack([splats.conics[:, 1], splats.conics[:, 2]], axis=1),
    ], axis=1)
    grad_conic_sym = np.stack([
        np.stack([grad_conic[:, 0], 0.5 * grad_conic[:, 1]], axis=1),
        np.stack([0.5 * grad_conic[:, 1], grad_conic[:, 2]], axis=1),
    ], axis=1)
    grad_cov2d = -conic @ grad_conic_sym @ conic

    # cov2d = T cov3d T^T with T = J W
    transform = splats.jacobians @ cam.rotation
    grad_cov3d = transform.transpose(0, 2, 1) @ grad_cov2d @ transform
    grad_transform = 2.0 * grad_cov2d @ transform @ splats.cov3d
    grad_jac = grad_transform @ cam.rotation.T

    tx, ty, tz = splats.cam_points[:, 0], splats.cam_points[:, 1], splats.cam_points[:, 2]
    fx, fy = cam.fx, cam.fy
    grad_t = np.zeros((m, 3))
    grad_t[:, 0] = grad_jac[:, 0, 2] * (-fx / (tz * tz)) + grad_mean2d[:, 0] * fx / tz
    grad_t[:, 1] = grad_jac[:, 1, 2] * (-fy / (tz * tz)) + grad_mean2d[:, 1] * fy / tz
    grad_t[:, 2] = (
        grad_jac[:, 0, 0] * (-fx / (tz * tz))
        + grad_jac[:, 0, 2] * (2.0 * fx * tx / tz ** 3)
        + grad_jac[:, 1, 1] * (-fy / (tz * tz))
        + grad_jac[:, 1, 2] * (2.0 * fy * ty / tz ** 3)
        - grad_mean2d[:, 0] * fx * tx / (tz * tz)
        - grad_mean2d[:, 1] * fy * ty / (tz * tz)
    )
    grad_means = grad_t @ cam.rotation

    grad_log_scales, grad_rotations = gaussians.covariance_vjp(grad_cov3d, splats.ids)
    opacity = splats.opacities

    ids = splats.ids
    gaussians.grads['means'][ids] += grad_means
    gaussians.grads['log_scales'][ids] += grad_log_scales
    gaussians.grads['rotations'][ids] += grad_rotations
    gaussians.grads['opacity_logits'][ids] += grad_opacity * opacity * (1.0 - opacity)
    gaussians.grads['colors'][ids] += grad_colors

    ndc_scale = np.array([0.5 * cam.width, 0.5 * cam.height])
    result.viewspace_grad_norm[ids] = np.linalg.norm(grad_mean2d * ndc_scale, axis=1)
    return result
