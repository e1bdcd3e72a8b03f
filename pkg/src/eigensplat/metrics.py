"""
Evaluation: Chamfer cloud-to-cloud distances, PSNR and SSIM.
The SSIM code also provides the gradient used by the photometric loss.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from plyfile import PlyData, PlyElement
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .constants import \
    CHAMFER_THRESHOLD, \
    MSE_FLOOR, \
    PSNR_CAP, \
    SSIM_C1, \
    SSIM_C2, \
    SSIM_SIGMA, \
    SSIM_WINDOW
from .errors import DimensionMismatchError, EmptyCloudError, ImageTooSmallError
from .neighborhood import PointCloud


logger = logging.getLogger('eigensplat')


@dataclass
class ChamferReport:
    """
    accuracy: recon -> reference mean distance, completeness: reference -> recon.
    Masking drops recon points farther than mask_threshold from the reference.
    """
    mean_all: float
    mean_masked: float
    mask_threshold: float
    accuracy: float
    accuracy_masked: float
    completeness: float
    recon_to_reference: np.ndarray
    reference_to_recon: np.ndarray
    fraction_masked_out: float

    def summary(self) -> dict[str, float]:
        return {
            'chamfer_all': self.mean_all,
            'chamfer_masked': self.mean_masked,
            'accuracy': self.accuracy,
            'accuracy_masked': self.accuracy_masked,
            'completeness': self.completeness,
            'threshold': self.mask_threshold,
            'fraction_masked_out': self.fraction_masked_out,
            'recon_points': float(self.recon_to_reference.size),
            'reference_points': float(self.reference_to_recon.size),
        }

    def write_csv(self, path: Path):
        pd.DataFrame([self.summary()]).to_csv(path, index=False)
        logger.info(f'Wrote Chamfer report to {path}')

    def write_distance_ply(self, recon: PointCloud, path: Path):
        """
        Reconstruction points with their nearest-reference distance as a
        scalar property, for heat-map viewing.
        """
        vertices = np.empty(len(recon), dtype=[('x', 'f8'), ('y', 'f8'), ('z', 'f8'), ('distance', 'f8')])
        vertices['x'] = recon.positions[:, 0]
        vertices['y'] = recon.positions[:, 1]
        vertices['z'] = recon.positions[:, 2]
        vertices['distance'] = self.recon_to_reference
        PlyData([PlyElement.describe(vertices, 'vertex')], text=True).write(str(path))
        logger.info(f'Wrote per-point distances to {path}')


def nearest_distances(source: PointCloud, target: PointCloud) -> np.ndarray:
    """
    Distance from every source point to its nearest target point.
    """
    tree = cKDTree(target.positions, balanced_tree=True)
    _, index = tree.query(source.positions, k=1)
    diff = source.positions - target.positions[index]
    return np.sqrt(np.sum(diff * diff, axis=1))


def brute_force_nearest_distances(source: PointCloud, target: PointCloud) -> np.ndarray:
    diff = source.positions[:, None, :] - target.positions[None, :, :]
    return np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=1))


def chamfer(recon: PointCloud, reference: PointCloud, threshold: float = CHAMFER_THRESHOLD) -> ChamferReport:
    """
    Symmetric Chamfer distance with the threshold mask on the accuracy direction.
    When every recon point is masked out the masked accuracy is reported as the
    threshold itself.
    :param recon: evaluated cloud (Gaussian centers)
    :param reference: ground-truth surface samples
    :param threshold: mask distance in scene units
    :return:
    """
    if len(recon) == 0 or len(reference) == 0:
        raise EmptyCloudError(f'Chamfer needs two nonempty clouds, got {len(recon)} and {len(reference)} points')
    to_reference = nearest_distances(recon, reference)
    to_recon = nearest_distances(reference, recon)
    accuracy = float(np.mean(to_reference))
    completeness = float(np.mean(to_recon))
    inside = to_reference <= threshold
    accuracy_masked = float(np.mean(to_reference[inside])) if np.any(inside) else float(threshold)
    return ChamferReport(
        mean_all=0.5 * (accuracy + completeness),
        mean_masked=0.5 * (accuracy_masked + completeness),
        mask_threshold=float(threshold),
        accuracy=accuracy,
        accuracy_masked=accuracy_masked,
        completeness=completeness,
        recon_to_reference=to_reference,
        reference_to_recon=to_recon,
        fraction_masked_out=float(1.0 - np.mean(inside)),
    )


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatchError(f'Image shapes differ: {a.shape} vs {b.shape}')


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio in dB for images on the [0, 1] scale.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - size // 2
    weights = np.exp(-offsets ** 2 / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _blur(image: np.ndarray) -> np.ndarray:
    """
    Separable Gaussian window over the two spatial axes, zero padded.
    The operator is symmetric, so it is also its own adjoint.
    """
    window = gaussian_window()
    out = correlate1d(image, window, axis=0, mode='constant', cval=0.0)
    return correlate1d(out, window, axis=1, mode='constant', cval=0.0)


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    mu_x = _blur(x)
    mu_y = _blur(y)
    var_x = _blur(x * x) - mu_x * mu_x
    var_y = _blur(y * y) - mu_y * mu_y
    cov_xy = _blur(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov_xy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return {
        'mu_x': mu_x, 'mu_y': mu_y,
        'a1': a1, 'a2': a2, 'b1': b1, 'b2': b2,
        'map': (a1 * a2) / (b1 * b2),
    }


def _check_ssim_inputs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ImageTooSmallError(f'SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape[:2]}')
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).
    """
    a, b = _check_ssim_inputs(a, b)
    return float(np.mean(_ssim_terms(a, b)['map']))


def ssim_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean SSIM and its gradient with respect to the first image.
    :param x: rendered image (H, W, C)
    :param y: reference image
    :return:
    """
    shape = np.shape(x)
    x, y = _check_ssim_inputs(x, y)
    terms = _ssim_terms(x, y)
    s = terms['map']
    a1, a2, b1, b2 = terms['a1'], terms['a2'], terms['b1'], terms['b2']
    mu_x, mu_y = terms['mu_x'], terms['mu_y']

    # Partials of the SSIM map w.r.t. the blurred moments mu_x, E[x^2] and E[xy].
    d_mu_x = s * (2.0 * mu_y / a1 - 2.0 * mu_y / a2 - 2.0 * mu_x / b1 + 2.0 * mu_x / b2)
    d_exx = -s / b2
    d_exy = 2.0 * s / a2

    count = s.size
    grad = (_blur(d_mu_x) + 2.0 * x * _blur(d_exx) + y * _blur(d_exy)) / count
    return float(np.mean(s)), grad.reshape(shape)
