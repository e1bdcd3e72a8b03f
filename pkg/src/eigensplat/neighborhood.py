"""
k-nearest-neighbor structure over Gaussian centers: index snapshots,
neighborhood covariances and the gradient of the neighborhood feature losses
with respect to point positions.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureKind, knn_feature_loss, shape_features
from .linalg3 import SymMat3, eig_sym3, normalization_vjp, normalize_eigenvalues
from .errors import InvalidInputError, TooFewPointsError


logger = logging.getLogger('eigensplat')

MIN_K = 3
# Extra candidates fetched from the tree so ties at the k-th distance can be resolved by index.
TIE_MARGIN = 4


@dataclass
class PointCloud:
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError('Point cloud contains non-finite coordinates')

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def extent(self) -> float:
        """
        Bounding box diagonal.
        """
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))


@dataclass(frozen=True)
class NeighborhoodIndex:
    """
    neighbors[i] holds the k nearest other points of point i, nearest first.
    """
    neighbors: np.ndarray
    iteration: int = 0

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def members(self) -> np.ndarray:
        """
        Point plus its neighbors, shape (n, k + 1), owner in column 0.
        """
        owners = np.arange(self.neighbors.shape[0])[:, None]
        return np.concatenate([owners, self.neighbors], axis=1)


def _squared_distances(positions: np.ndarray, candidates: np.ndarray, queries: np.ndarray) -> np.ndarray:
    diff = positions[candidates] - positions[queries][:, None, :]
    return np.sum(diff * diff, axis=-1)


def _select(candidates: np.ndarray, d2: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Order candidates by (distance, index) and keep the first k.
    :return: selected indices and the boundary flag telling whether the k-th
             distance reaches the farthest candidate (a tie may be cut off)
    """
    order = np.lexsort((candidates, d2), axis=-1)
    candidates = np.take_along_axis(candidates, order, axis=-1)
    d2 = np.take_along_axis(d2, order, axis=-1)
    kth = d2[:, k - 1]
    finite = np.where(np.isfinite(d2), d2, -np.inf)
    farthest = finite.max(axis=1)
    return candidates[:, :k], kth >= farthest


def build_index(pc: PointCloud, k: int, iteration: int = 0) -> NeighborhoodIndex:
    """
    Exact k nearest neighbors of every point, ties broken by lower index.
    :param pc:
    :param k: neighbors per point, owner excluded
    :param iteration: training iteration of the snapshot
    :return:
    """
    n = len(pc)
    if k < MIN_K:
        raise TooFewPointsError(f'k must be at least {MIN_K}, got {k}')
    if n < k + 1:
        raise TooFewPointsError(f'{n} points are too few for k={k} neighbors')

    positions = pc.positions
    tree = cKDTree(positions, balanced_tree=True)
    neighbors = np.empty((n, k), dtype=np.int64)
    pending = np.arange(n)
    want = min(n, k + 1 + TIE_MARGIN)

    while pending.size:
        _, candidates = tree.query(positions[pending], k=want)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(pending.size, want)
        d2 = _squared_distances(positions, candidates, pending)
        d2 = np.where(candidates == pending[:, None], np.inf, d2)
        selected, on_boundary = _select(candidates, d2, k)
        if want >= n:
            on_boundary[:] = False
        neighbors[pending[~on_boundary]] = selected[~on_boundary]
        pending = pending[on_boundary]
        if pending.size:
            logger.debug(f'{pending.size} points have ties at the k-th neighbor, widening search')
            want = min(n, 2 * want)

    logger.debug(f'Built kNN index over {n} points, k={k}, iteration {iteration}')
    return NeighborhoodIndex(neighbors, iteration)


def brute_force_index(pc: PointCloud, k: int) -> NeighborhoodIndex:
    """
    O(n^2) all-pairs reference with the same tie rule as build_index.
    """
    n = len(pc)
    if k < MIN_K or n < k + 1:
        raise TooFewPointsError(f'{n} points are too few for k={k} neighbors')
    candidates = np.broadcast_to(np.arange(n), (n, n)).copy()
    d2 = np.sum((pc.positions[None, :, :] - pc.positions[:, None, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    order = np.lexsort((candidates, d2), axis=-1)
    return NeighborhoodIndex(np.take_along_axis(candidates, order, axis=-1)[:, :k])


def neighborhood_covariances(pc: PointCloud, idx: NeighborhoodIndex) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Centroid and covariance of every point together with its k neighbors.
    :return: covariances (n, 3, 3), centroids (n, 3), deviations p_j - centroid (n, k + 1, 3)
    """
    members = idx.members()
    points = pc.positions[members]
    centroids = points.mean(axis=1)
    deviations = points - centroids[:, None, :]
    covariances = np.einsum('nja,njb->nab', deviations, deviations) / members.shape[1]
    return covariances, centroids, deviations


def neighborhood_covariance(pc: PointCloud, idx: NeighborhoodIndex, i: int) -> tuple[SymMat3, np.ndarray]:
    """
    Covariance and centroid of a single neighborhood.
    """
    if not 0 <= i < len(pc):
        raise InvalidInputError(f'Point id {i} out of range for {len(pc)} points')
    members = np.concatenate([[i], idx.neighbors[i]])
    points = pc.positions[members]
    centroid = points.mean(axis=0)
    deviations = points - centroid
    covariance = deviations.T @ deviations / members.size
    return SymMat3.from_dense(covariance), centroid


def knn_loss_and_grad(pc: PointCloud, idx: NeighborhoodIndex, kind: FeatureKind) -> tuple[float, np.ndarray]:
    """
    Mean neighborhood feature loss over all points and its gradient with
    respect to every position. Neighbor selection is held fixed.
    :param pc:
    :param idx:
    :param kind: one of the kNN feature kinds
    :return: loss, gradient of shape (n, 3)
    """
    if not kind.is_knn:
        raise InvalidInputError(f'{kind.value} is not a neighborhood loss')
    n = len(pc)
    covariances, _, deviations = neighborhood_covariances(pc, idx)
    eigen = eig_sym3(covariances)
    normalized = normalize_eigenvalues(eigen)
    feature = knn_feature_loss(kind, normalized)
    loss = float(np.mean(feature.value))

    grad_values = normalization_vjp(eigen.values, normalized, feature.gradient) / n
    grad_cov = np.einsum('nk,nak,nbk->nab', grad_values, eigen.vectors, eigen.vectors)
    size = deviations.shape[1]
    per_member = (2.0 / size) * np.einsum('nab,njb->nja', grad_cov, deviations)

    members = idx.members().ravel()
    per_member = per_member.reshape(-1, 3)
    grad = np.stack([
        np.bincount(members, weights=per_member[:, axis], minlength=n)
        for axis in range(3)
    ], axis=-1)
    return loss, grad


def neighborhood_features(pc: PointCloud, idx: NeighborhoodIndex) -> dict[str, np.ndarray]:
    """
    Per-point planarity, omnivariance and eigenentropy of the kNN neighborhoods.
    """
    covariances, _, _ = neighborhood_covariances(pc, idx)
    normalized = normalize_eigenvalues(eig_sym3(covariances))
    features = shape_features(normalized)
    features['degenerate'] = normalized.degenerate
    return features
