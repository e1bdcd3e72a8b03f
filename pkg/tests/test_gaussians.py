import math

import numpy as np
import pytest

from conftest import central_difference, make_gaussians
from eigensplat.errors import InvalidInputError, PlyFormatError
from eigensplat.gaussians import \
    GaussianSet, \
    clamp_parameters, \
    gaussian_planarity_loss, \
    quaternion_to_rotation, \
    rotation_vjp, \
    sigmoid
from eigensplat.linalg3 import eig_sym3


def random_set(rng: np.random.Generator, n: int) -> GaussianSet:
    return GaussianSet(
        means=rng.normal(size=(n, 3)),
        log_scales=rng.normal(-1.0, 0.5, size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(size=n),
        colors=rng.random((n, 3)),
    )


def test_axis_aligned_covariance():
    g = make_gaussians([0.0, 0.0, 0.0], [2.0, 1.0, 0.5], 0.5, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(g.world_covariance(0).dense(), np.diag([4.0, 1.0, 0.25]), atol=1e-12)


def test_rotated_covariance():
    half = math.sqrt(0.5)
    g = make_gaussians([0.0, 0.0, 0.0], [2.0, 1.0, 1.0], 0.5, [0.5, 0.5, 0.5],
                       rotations=np.array([[half, 0.0, 0.0, half]]))
    np.testing.assert_allclose(g.world_covariance(0).dense(), np.diag([1.0, 4.0, 1.0]), atol=1e-12)
    with pytest.raises(InvalidInputError):
        g.world_covariance(1)


def test_spectrum_is_squared_scales(rng):
    g = random_set(rng, 40)
    values = eig_sym3(g.covariances()).values
    expected = -np.sort(-g.scales ** 2, axis=1)
    np.testing.assert_allclose(values, expected, rtol=1e-9, atol=1e-12)


def test_rotations_are_orthonormal(rng):
    rotation = quaternion_to_rotation(rng.normal(size=(25, 4)))
    np.testing.assert_allclose(rotation @ rotation.transpose(0, 2, 1), np.broadcast_to(np.eye(3), (25, 3, 3)),
                               atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(rotation), 1.0, atol=1e-12)


def test_rotation_vjp(rng):
    q = rng.normal(size=(1, 4))
    weights = rng.normal(size=(1, 3, 3))

    def objective():
        return float(np.sum(weights * quaternion_to_rotation(q)))

    numeric = central_difference(objective, q, 1e-7)
    np.testing.assert_allclose(rotation_vjp(q, weights), numeric, rtol=1e-6, atol=1e-9)


def test_covariance_vjp(rng):
    g = random_set(rng, 6)
    weights = rng.normal(size=(6, 3, 3))
    weights = 0.5 * (weights + weights.transpose(0, 2, 1))

    def objective():
        return float(np.sum(weights * g.covariances()))

    grad_log_scales, grad_rotations = g.covariance_vjp(weights)
    np.testing.assert_allclose(grad_log_scales, central_difference(objective, g.log_scales, 1e-7),
                               rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(grad_rotations, central_difference(objective, g.rotations, 1e-7),
                               rtol=1e-6, atol=1e-9)

    ids = np.array([4, 1])
    sub_scales, sub_rotations = g.covariance_vjp(weights[ids], ids)
    np.testing.assert_allclose(sub_scales, grad_log_scales[ids])
    np.testing.assert_allclose(sub_rotations, grad_rotations[ids])


@pytest.mark.parametrize('scales, expected', [
    ([1.0, 1.0, 1e-6], 0.0),
    ([1.0, 1.0, 1.0], 1.0),
    ([1.0, 1e-9, 1e-9], 1.0),
])
def test_planarity_loss_examples(scales, expected):
    g = make_gaussians([0.0, 0.0, 0.0], scales, 0.5, [0.5, 0.5, 0.5])
    loss, _ = gaussian_planarity_loss(g)
    assert loss == pytest.approx(expected, abs=1e-5)


@pytest.mark.parametrize('squared', [False, True])
def test_planarity_loss_gradient(squared, rng):
    g = random_set(rng, 30)
    loss, grad = gaussian_planarity_loss(g, squared=squared, weight=2.5)
    np.testing.assert_allclose(g.grads['log_scales'], 2.5 * grad)
    assert 0.0 <= loss <= 1.0

    def objective():
        return gaussian_planarity_loss(g.copy(), squared=squared)[0]

    numeric = central_difference(objective, g.log_scales, 1e-6)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-9)


def test_planarity_loss_invariances(rng):
    g = random_set(rng, 30)
    loss, _ = gaussian_planarity_loss(g)
    moved = g.copy()
    moved.means = moved.means + 10.0
    moved.rotations = rng.normal(size=(30, 4))
    moved.log_scales = moved.log_scales + np.log(3.0)
    assert gaussian_planarity_loss(moved)[0] == pytest.approx(loss, abs=1e-12)


def test_planarity_loss_needs_gaussians():
    empty = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        gaussian_planarity_loss(empty)


def test_clamp_parameters():
    g = make_gaussians([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], [[1e-12, 1.0, 1e6], [1.0, 1.0, 1.0]], [0.5, 0.5],
                       np.full((2, 3), 0.5), rotations=np.array([[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
    g.opacity_logits = np.array([40.0, -40.0])
    clamp_parameters(g, extent=10.0)
    np.testing.assert_allclose(g.rotations, [[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    assert g.scales[0, 0] == pytest.approx(1e-5)
    assert g.scales[0, 2] == pytest.approx(10.0)
    assert g.opacities[0] == pytest.approx(1.0 - 1e-4)
    assert g.opacities[1] == pytest.approx(1e-4)


def test_select_extend_copy(rng):
    g = random_set(rng, 5)
    g.grads['colors'][:] = 1.0
    picked = g.select(np.array([True, False, True, False, False]))
    assert len(picked) == 2
    np.testing.assert_array_equal(picked.means, g.means[[0, 2]])
    np.testing.assert_array_equal(picked.grads['colors'], np.ones((2, 3)))
    assert len(g.extend(picked)) == 7
    duplicate = g.copy()
    duplicate.means[0, 0] += 1.0
    assert duplicate.means[0, 0] != g.means[0, 0]


def test_from_points():
    g = GaussianSet.from_points(np.zeros((3, 3)), np.full((3, 3), 2.0), np.array([0.5, 1.0, 2.0]), opacity=0.1)
    np.testing.assert_allclose(g.scales, [[0.5] * 3, [1.0] * 3, [2.0] * 3])
    np.testing.assert_allclose(g.opacities, 0.1)
    np.testing.assert_array_equal(g.colors, np.ones((3, 3)))


@pytest.mark.parametrize('text', [True, False])
def test_ply_round_trip(text, rng, tmp_path):
    g = random_set(rng, 12)
    path = tmp_path / 'gaussians.ply'
    g.save_ply(path, text=text)
    loaded = GaussianSet.load_ply(path)
    for name, value in g.parameters().items():
        np.testing.assert_allclose(getattr(loaded, name), value, rtol=1e-12, atol=0)


def test_ply_missing_properties(tmp_path):
    path = tmp_path / 'points.ply'
    path.write_text('ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n'
                    'property float z\nend_header\n0 0 0\n')
    with pytest.raises(PlyFormatError):
        GaussianSet.load_ply(path)


def test_sigmoid_is_stable():
    assert sigmoid(np.array(-800.0)) == 0.0
    assert sigmoid(np.array(800.0)) == 1.0
