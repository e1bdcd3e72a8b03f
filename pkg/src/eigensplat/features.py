"""
Eigenvalue shape features and their loss forms.

Every function takes normalized eigenvalues of shape (..., 3), descending, and
returns the value together with its gradient with respect to the three
normalized eigenvalues treated as free variables. The chain rule through the
normalization itself is applied by the callers.
"""
import enum
from typing import NamedTuple, Optional, Union

import numpy as np

from .constants import EPS_DIV, EPS_LOG
from .linalg3 import NormalizedEigenvalues


class FeatureKind(enum.Enum):
    PLANARITY_GAUSSIAN = 'planarity-gaussian'
    PLANARITY_KNN = 'planarity-knn'
    OMNIVARIANCE_KNN = 'omnivariance-knn'
    EIGENENTROPY_KNN = 'eigenentropy-knn'

    @property
    def is_knn(self) -> bool:
        return self is not FeatureKind.PLANARITY_GAUSSIAN

    @classmethod
    def from_name(cls, name: Optional[str]) -> Optional['FeatureKind']:
        """
        Parse a command line / config name. 'none' (or None) selects the
        photometric-only baseline.
        :param name:
        :return:
        """
        if name is None or name.lower() == 'none':
            return None
        return cls(name.lower())


class FeatureValue(NamedTuple):
    value: np.ndarray
    gradient: np.ndarray


Normalized = Union[NormalizedEigenvalues, np.ndarray]


def _values(n: Normalized) -> np.ndarray:
    if isinstance(n, NormalizedEigenvalues):
        return np.asarray(n.values, dtype=np.float64)
    return np.asarray(n, dtype=np.float64)


def planarity(n: Normalized) -> FeatureValue:
    """
    (l2 - l3) / l1
    """
    lam = _values(n)
    l1 = np.maximum(lam[..., 0], EPS_DIV)
    spread = lam[..., 1] - lam[..., 2]
    value = spread / l1
    gradient = np.stack([-spread / (l1 * l1), 1.0 / l1, -1.0 / l1], axis=-1)
    return FeatureValue(value, gradient)


def planarity_loss(n: Normalized) -> FeatureValue:
    feature = planarity(n)
    return FeatureValue(1.0 - feature.value, -feature.gradient)


def omnivariance_loss(n: Normalized) -> FeatureValue:
    """
    Cube root of the eigenvalue product: the volume spread of a neighborhood.
    """
    lam = np.maximum(_values(n), 0.0)
    value = np.cbrt(lam[..., 0] * lam[..., 1] * lam[..., 2])
    gradient = value[..., None] / (3.0 * np.maximum(lam, EPS_DIV))
    return FeatureValue(value, gradient)


def eigenentropy_loss(n: Normalized) -> FeatureValue:
    """
    Shannon entropy (natural log) of the normalized eigenvalues, with 0 * ln 0 = 0.
    """
    lam = np.maximum(_values(n), 0.0)
    log_lam = np.log(np.maximum(lam, EPS_LOG))
    value = -np.sum(lam * log_lam, axis=-1)
    gradient = -(log_lam + 1.0)
    return FeatureValue(value, gradient)


def knn_feature_loss(kind: FeatureKind, n: Normalized) -> FeatureValue:
    match kind:
        case FeatureKind.PLANARITY_KNN:
            return planarity_loss(n)
        case FeatureKind.OMNIVARIANCE_KNN:
            return omnivariance_loss(n)
        case FeatureKind.EIGENENTROPY_KNN:
            return eigenentropy_loss(n)
        case _:
            raise ValueError(f'{kind} is not a neighborhood feature')


def shape_features(n: Normalized) -> dict[str, np.ndarray]:
    """
    Plain feature values (not losses) for reporting.
    :param n:
    :return: planarity, omnivariance and eigenentropy arrays
    """
    return {
        'planarity': planarity(n).value,
        'omnivariance': omnivariance_loss(n).value,
        'eigenentropy': eigenentropy_loss(n).value,
    }
