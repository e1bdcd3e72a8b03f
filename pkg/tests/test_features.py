import math

import numpy as np
import pytest

from eigensplat.constants import FEATURE_NAMES
from eigensplat.features import \
    FeatureKind, \
    eigenentropy_loss, \
    knn_feature_loss, \
    omnivariance_loss, \
    planarity, \
    planarity_loss, \
    shape_features
from eigensplat.linalg3 import normalize_eigenvalues


THIRD = 1.0 / 3.0


@pytest.mark.parametrize('values, expected', [
    ((0.5, 0.5, 0.0), 1.0),
    ((THIRD, THIRD, THIRD), 0.0),
    ((1.0, 0.0, 0.0), 0.0),
])
def test_planarity_anchors(values, expected):
    assert planarity(np.array(values)).value == pytest.approx(expected, abs=1e-12)


def test_planarity_loss_example():
    assert planarity_loss(np.array([0.6, 0.3, 0.1])).value == pytest.approx(2.0 / 3.0, abs=1e-12)


@pytest.mark.parametrize('values, expected', [
    ((THIRD, THIRD, THIRD), THIRD),
    ((0.5, 0.5, 0.0), 0.0),
    ((0.6, 0.3, 0.1), 0.018 ** THIRD),
])
def test_omnivariance_examples(values, expected):
    assert omnivariance_loss(np.array(values)).value == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize('values, expected', [
    ((THIRD, THIRD, THIRD), math.log(3.0)),
    ((1.0, 0.0, 0.0), 0.0),
    ((0.5, 0.5, 0.0), math.log(2.0)),
])
def test_eigenentropy_examples(values, expected):
    assert eigenentropy_loss(np.array(values)).value == pytest.approx(expected, abs=1e-12)


def check_ranges(rng: np.random.Generator, size: int):
    samples = -np.sort(-rng.dirichlet(np.ones(3), size=size), axis=1)
    features = shape_features(samples)
    assert np.all((features['planarity'] >= 0.0) & (features['planarity'] <= 1.0))
    assert np.all((features['omnivariance'] >= 0.0) & (features['omnivariance'] <= THIRD + 1e-12))
    assert np.all((features['eigenentropy'] >= 0.0) & (features['eigenentropy'] <= math.log(3.0) + 1e-12))


def test_ranges_on_the_simplex(rng):
    check_ranges(rng, 100_000)


@pytest.mark.slow
def test_ranges_on_a_million_simplex_samples(rng):
    check_ranges(rng, 1_000_000)


def test_accepts_normalized_triples(rng):
    raw = -np.sort(-rng.random((10, 3)), axis=1)
    normalized = normalize_eigenvalues(raw)
    np.testing.assert_array_equal(planarity(normalized).value, planarity(normalized.values).value)


@pytest.mark.parametrize('loss', [planarity_loss, omnivariance_loss, eigenentropy_loss])
def test_gradients(loss, rng):
    points = -np.sort(-rng.dirichlet(np.ones(3), size=20), axis=1)
    points = points[points[:, 2] > 0.05]
    h = 1e-6
    for lam in points:
        analytic = loss(lam).gradient
        numeric = np.array([
            (loss(lam + h * np.eye(3)[i]).value - loss(lam - h * np.eye(3)[i]).value) / (2 * h)
            for i in range(3)
        ])
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_kind_names():
    assert FeatureKind.from_name('none') is None
    assert FeatureKind.from_name(None) is None
    assert FeatureKind.from_name('Planarity-KNN') is FeatureKind.PLANARITY_KNN
    assert not FeatureKind.PLANARITY_GAUSSIAN.is_knn
    assert FeatureKind.EIGENENTROPY_KNN.is_knn
    with pytest.raises(ValueError):
        FeatureKind.from_name('curvature')


def test_knn_dispatch():
    lam = np.array([0.6, 0.3, 0.1])
    assert knn_feature_loss(FeatureKind.OMNIVARIANCE_KNN, lam).value == omnivariance_loss(lam).value
    with pytest.raises(ValueError):
        knn_feature_loss(FeatureKind.PLANARITY_GAUSSIAN, lam)


def test_feature_names_match_kinds():
    assert FEATURE_NAMES == ['none'] + [kind.value for kind in FeatureKind]
    for name in FEATURE_NAMES:
        kind = FeatureKind.from_name(name)
        assert (kind is None) == (name == 'none')
