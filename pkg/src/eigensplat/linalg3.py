"""
Symmetric 3x3 eigen-systems.

All functions are vectorized over leading batch axes: a stack of matrices has
shape (..., 3, 3), eigenvalue triples have shape (..., 3). The closed form solver
follows the non-iterative trigonometric approach for symmetric 3x3 matrices; the
cyclic Jacobi solver is kept as an independent reference.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .constants import EPS_SUM, NEGATIVE_EIGEN_SLACK
from .errors import InvalidCovarianceError, InvalidInputError


logger = logging.getLogger('eigensplat')

# Upper triangle order used by SymMat3.upper: xx, xy, xz, yy, yz, zz
_UPPER_ROWS = np.array([0, 0, 0, 1, 1, 2])
_UPPER_COLS = np.array([0, 1, 2, 1, 2, 2])


@dataclass(frozen=True)
class SymMat3:
    """
    Symmetric 3x3 matrix (or a stack of them) stored as its upper triangle.
    """
    upper: np.ndarray

    @classmethod
    def from_dense(cls, matrix: np.ndarray) -> 'SymMat3':
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[..., _UPPER_ROWS, _UPPER_COLS])

    def dense(self) -> np.ndarray:
        upper = np.asarray(self.upper, dtype=np.float64)
        out = np.empty(upper.shape[:-1] + (3, 3))
        out[..., _UPPER_ROWS, _UPPER_COLS] = upper
        out[..., _UPPER_COLS, _UPPER_ROWS] = upper
        return out


MatrixLike = Union[SymMat3, np.ndarray]


class EigenTriple(NamedTuple):
    """
    Eigenvalues in descending order and the matching unit eigenvectors,
    stored column-wise: vectors[..., :, i] belongs to values[..., i].
    """
    values: np.ndarray
    vectors: np.ndarray


class NormalizedEigenvalues(NamedTuple):
    """
    Eigenvalues divided by their sum. `degenerate` flags triples whose sum was
    below EPS_SUM and which were replaced by (1/3, 1/3, 1/3).
    """
    values: np.ndarray
    degenerate: np.ndarray


def as_dense(m: MatrixLike) -> np.ndarray:
    """
    Dense symmetric view of the input, built from the upper triangle only.
    :param m: SymMat3 or array of shape (..., 3, 3)
    :return:
    """
    if isinstance(m, SymMat3):
        return m.dense()
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise InvalidInputError(f'Expected (..., 3, 3) matrices, got shape {m.shape}')
    return SymMat3.from_dense(m).dense()


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([
        a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
        a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
        a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0],
    ], axis=-1)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum('ni,ni->n', a, b)


def _extreme_eigenvector(a: np.ndarray, value: np.ndarray) -> np.ndarray:
    """
    Eigenvector of a simple eigenvalue: the longest cross product of two rows of
    (A - value * I).
    """
    shifted = a - value[:, None, None] * np.eye(3)
    r0, r1, r2 = shifted[:, 0], shifted[:, 1], shifted[:, 2]
    candidates = np.stack([_cross(r0, r1), _cross(r0, r2), _cross(r1, r2)], axis=1)
    lengths = np.einsum('nki,nki->nk', candidates, candidates)
    best = np.argmax(lengths, axis=1)
    rows = np.arange(a.shape[0])
    chosen = candidates[rows, best]
    length = np.sqrt(lengths[rows, best])
    fallback = length <= 0.0
    length = np.where(fallback, 1.0, length)
    vector = chosen / length[:, None]
    vector[fallback] = np.array([1.0, 0.0, 0.0])
    return vector


def _orthogonal_complement(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    first = np.abs(w[:, 0]) > np.abs(w[:, 1])
    zeros = np.zeros(w.shape[0])
    inv_a = 1.0 / np.sqrt(np.maximum(w[:, 0] ** 2 + w[:, 2] ** 2, np.finfo(float).tiny))
    inv_b = 1.0 / np.sqrt(np.maximum(w[:, 1] ** 2 + w[:, 2] ** 2, np.finfo(float).tiny))
    u_a = np.stack([-w[:, 2] * inv_a, zeros, w[:, 0] * inv_a], axis=-1)
    u_b = np.stack([zeros, w[:, 2] * inv_b, -w[:, 1] * inv_b], axis=-1)
    u = np.where(first[:, None], u_a, u_b)
    return u, _cross(w, u)


def _middle_eigenvector(a: np.ndarray, known: np.ndarray, value: np.ndarray) -> np.ndarray:
    """
    Eigenvector for the middle eigenvalue, searched in the plane orthogonal to
    an already known eigenvector.
    """
    u, v = _orthogonal_complement(known)
    au = np.einsum('nij,nj->ni', a, u)
    av = np.einsum('nij,nj->ni', a, v)
    m00 = _dot(u, au) - value
    m01 = _dot(u, av)
    m11 = _dot(v, av) - value
    abs00, abs01, abs11 = np.abs(m00), np.abs(m01), np.abs(m11)

    # Normalize the 2x2 null-space direction by its largest entry.
    use_row0 = abs00 >= abs11
    big0 = np.maximum(abs00, abs01)
    big1 = np.maximum(abs11, abs01)
    big = np.where(use_row0, big0, big1)

    with np.errstate(divide='ignore', invalid='ignore'):
        # row 0: direction (m01, -m00)
        r0_div_00 = abs00 >= abs01
        t = np.where(r0_div_00, m01 / m00, m00 / m01)
        n = 1.0 / np.sqrt(1.0 + t * t)
        c0_a = np.where(r0_div_00, t * n, n)
        c0_b = np.where(r0_div_00, n, t * n)
        # row 1: direction (m11, -m01)
        r1_div_11 = abs11 >= abs01
        s = np.where(r1_div_11, m01 / m11, m11 / m01)
        k = 1.0 / np.sqrt(1.0 + s * s)
        c1_a = np.where(r1_div_11, k, s * k)
        c1_b = np.where(r1_div_11, s * k, k)

    coef_u = np.where(use_row0, c0_a, c1_a)
    coef_v = np.where(use_row0, c0_b, c1_b)
    vector = coef_u[:, None] * u - coef_v[:, None] * v
    return np.where((big > 0.0)[:, None], vector, u)


def eig_sym3(m: MatrixLike) -> EigenTriple:
    """
    Closed form eigendecomposition of symmetric 3x3 matrices.
    :param m: SymMat3 or (..., 3, 3) array; only the upper triangle is read
    :return: EigenTriple with values in descending order
    """
    a = as_dense(m)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError('eig_sym3 received non-finite matrix entries')

    batch_shape = a.shape[:-2]
    a = a.reshape(-1, 3, 3)
    count = a.shape[0]

    max_abs = np.max(np.abs(a.reshape(count, 9)), axis=1)
    scale = np.where(max_abs > 0.0, max_abs, 1.0)
    a = a / scale[:, None, None]

    a00, a01, a02 = a[:, 0, 0], a[:, 0, 1], a[:, 0, 2]
    a11, a12, a22 = a[:, 1, 1], a[:, 1, 2], a[:, 2, 2]
    off_norm = a01 * a01 + a02 * a02 + a12 * a12
    diagonal = off_norm <= 0.0

    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p = np.sqrt((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off_norm) / 6.0)
    p_safe = np.where(p > 0.0, p, 1.0)
    c00 = b11 * b22 - a12 * a12
    c01 = a01 * b22 - a12 * a02
    c02 = a01 * a12 - b11 * a02
    det = (b00 * c00 - a01 * c01 + a02 * c02) / (p_safe ** 3)
    half_det = np.clip(0.5 * det, -1.0, 1.0)
    angle = np.arccos(half_det) / 3.0
    beta_hi = 2.0 * np.cos(angle)
    beta_lo = 2.0 * np.cos(angle + 2.0 * np.pi / 3.0)
    beta_mid = -(beta_lo + beta_hi)
    value_lo = q + p * beta_lo
    value_mid = q + p * beta_mid
    value_hi = q + p * beta_hi

    # Start from the eigenvalue farthest from the other two.
    start_high = half_det >= 0.0
    first_value = np.where(start_high, value_hi, value_lo)
    first = _extreme_eigenvector(a, first_value)
    middle = _middle_eigenvector(a, first, value_mid)
    third = np.where(start_high[:, None], _cross(middle, first), _cross(first, middle))
    vec_hi = np.where(start_high[:, None], first, third)
    vec_lo = np.where(start_high[:, None], third, first)

    values = np.stack([value_hi, value_mid, value_lo], axis=-1)
    vectors = np.stack([vec_hi, middle, vec_lo], axis=-1)

    if np.any(diagonal):
        diag_values = np.stack([a00, a11, a22], axis=-1)[diagonal]
        order = np.argsort(-diag_values, axis=1, kind='stable')
        values[diagonal] = np.take_along_axis(diag_values, order, axis=1)
        vectors[diagonal] = np.eye(3)[:, order].transpose(1, 0, 2)

    values = values * scale[:, None]
    return EigenTriple(
        values.reshape(batch_shape + (3,)),
        vectors.reshape(batch_shape + (3, 3)),
    )


def eig_sym3_jacobi(m: MatrixLike, max_sweeps: int = 50) -> EigenTriple:
    """
    Cyclic Jacobi rotations, one matrix at a time. Slow, used as a reference.
    :param m:
    :param max_sweeps:
    :return:
    """
    a_all = as_dense(m)
    batch_shape = a_all.shape[:-2]
    a_all = a_all.reshape(-1, 3, 3)
    values = np.empty((a_all.shape[0], 3))
    vectors = np.empty((a_all.shape[0], 3, 3))

    for n, matrix in enumerate(a_all):
        a = matrix.copy()
        v = np.eye(3)
        frob2 = float(np.sum(a * a))
        for _ in range(max_sweeps):
            off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
            if off <= 1e-36 * frob2 or off == 0.0:
                break
            for p, q in ((0, 1), (0, 2), (1, 2)):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                sign = 1.0 if theta >= 0.0 else -1.0
                t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(3)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
        order = np.argsort(-np.diag(a), kind='stable')
        values[n] = np.diag(a)[order]
        vectors[n] = v[:, order]

    return EigenTriple(values.reshape(batch_shape + (3,)), vectors.reshape(batch_shape + (3, 3)))


def reconstruct(e: EigenTriple) -> np.ndarray:
    """
    Sum of values[i] * v_i v_i^T.
    """
    return np.einsum('...ik,...k,...jk->...ij', e.vectors, e.values, e.vectors)


def normalize_eigenvalues(e: Union[EigenTriple, np.ndarray]) -> NormalizedEigenvalues:
    """
    Divide each eigenvalue triple by its sum.
    Negative values within NEGATIVE_EIGEN_SLACK of zero are clamped to zero;
    triples summing to less than EPS_SUM become (1/3, 1/3, 1/3) and are flagged.
    :param e: EigenTriple or (..., 3) array of descending eigenvalues
    :return:
    """
    values = np.asarray(e.values if isinstance(e, EigenTriple) else e, dtype=np.float64)
    if np.any(values < -NEGATIVE_EIGEN_SLACK):
        worst = float(np.min(values))
        raise InvalidCovarianceError(f'Eigenvalue {worst:.3e} is below -{NEGATIVE_EIGEN_SLACK:g}')
    values = np.maximum(values, 0.0)
    total = values.sum(axis=-1)
    degenerate = total < EPS_SUM
    safe_total = np.where(degenerate, 1.0, total)
    normalized = values / safe_total[..., None]
    normalized = np.where(degenerate[..., None], 1.0 / 3.0, normalized)
    if np.any(degenerate):
        count = int(np.count_nonzero(degenerate))
        logger.debug(f'{count} of {degenerate.size} eigenvalue triples sum to zero, using (1/3, 1/3, 1/3)')
    return NormalizedEigenvalues(normalized, degenerate)


def normalization_vjp(
        raw: np.ndarray,
        normalized: NormalizedEigenvalues,
        grad_normalized: np.ndarray
) -> np.ndarray:
    """
    Pull a gradient with respect to normalized eigenvalues back to the raw ones:
    d l'_i / d l_m = (delta_im * S - l_i) / S^2. Degenerate triples get zero.
    :param raw: (..., 3) eigenvalues before normalization
    :param normalized: result of normalize_eigenvalues(raw)
    :param grad_normalized: (..., 3) gradient w.r.t. normalized values
    :return:
    """
    total = np.maximum(raw, 0.0).sum(axis=-1)
    safe_total = np.where(normalized.degenerate, 1.0, total)
    projected = np.einsum('...i,...i->...', grad_normalized, normalized.values)
    grad = (grad_normalized - projected[..., None]) / safe_total[..., None]
    return np.where(normalized.degenerate[..., None], 0.0, grad)


def eigenvalue_jacobian(e: EigenTriple) -> np.ndarray:
    """
    d lambda_i / dC = v_i v_i^T for each of the three eigenvalues.
    :param e:
    :return: array of shape (..., 3, 3, 3); [..., i, :, :] is the Jacobian of lambda_i
    """
    return np.einsum('...ak,...bk->...kab', e.vectors, e.vectors)
