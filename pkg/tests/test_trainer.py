import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from eigensplat.constants import CHECKPOINT_DIR, METRICS_COLUMNS, METRICS_FILE, RENDER_DIR
from eigensplat.errors import NonFiniteLossError
from eigensplat.features import FeatureKind
from eigensplat.gaussians import GaussianSet, SceneBundle, inverse_sigmoid
from eigensplat.neighborhood import PointCloud, knn_loss_and_grad
from eigensplat.renderer import photometric_loss, render
from eigensplat.trainer import \
    AdamOptimizer, \
    Trainer, \
    position_lr, \
    run_summary, \
    split_views, \
    train, \
    view_order, \
    write_outputs


def fresh_bundle(scene, gaussians: GaussianSet = None) -> SceneBundle:
    bundle = scene.bundle
    return SceneBundle(
        gaussians=(gaussians if gaussians is not None else bundle.gaussians).copy(),
        cameras=bundle.cameras,
        images=bundle.images,
        reference=bundle.reference,
        extent=bundle.extent,
        background=bundle.background,
    )


def test_adam_minimizes_a_quadratic():
    target = np.array([1.0, -0.5, 2.0])
    params = {'x': np.zeros(3)}
    adam = AdamOptimizer()
    for _ in range(2000):
        adam.step(params, {'x': 2.0 * (params['x'] - target)}, {'x': 0.01})
    assert np.sum((params['x'] - target) ** 2) < 1e-6


def test_adam_zero_gradient_is_a_no_op():
    params = {'a': np.array([1.0, 2.0]), 'b': np.array([[3.0]])}
    before = {name: value.copy() for name, value in params.items()}
    adam = AdamOptimizer()
    for _ in range(3):
        adam.step(params, {name: np.zeros_like(value) for name, value in params.items()}, {'a': 0.1, 'b': 0.1})
    for name in params:
        np.testing.assert_array_equal(params[name], before[name])


def test_adam_groups_have_their_own_steps():
    params = {'a': np.zeros(2), 'b': np.zeros(2)}
    adam = AdamOptimizer()
    adam.step(params, {'a': np.ones(2), 'b': np.ones(2)}, {'a': 0.1, 'b': 0.2})
    adam.step(params, {'a': np.ones(2)}, {'a': 0.1})
    assert adam.steps == {'a': 2, 'b': 1}
    np.testing.assert_allclose(params['a'], -0.2)
    np.testing.assert_allclose(params['b'], -0.2)


def test_adam_reindex():
    params = {'x': np.zeros(3)}
    adam = AdamOptimizer()
    adam.step(params, {'x': np.array([1.0, 2.0, 3.0])}, {'x': 0.1})
    adam.reindex(np.array([2, -1, 0, 0]))
    first, second = adam.moments['x']
    np.testing.assert_allclose(first, 0.1 * np.array([3.0, 0.0, 1.0, 1.0]))
    np.testing.assert_allclose(second, 0.001 * np.array([9.0, 0.0, 1.0, 1.0]))


def test_position_lr_schedule(quick_config):
    cfg = replace(quick_config, lr_position_init=1e-2, lr_position_final=1e-4, max_iterations=100)
    assert position_lr(cfg, 0, 10.0) == pytest.approx(0.1)
    assert position_lr(cfg, 50, 10.0) == pytest.approx(1e-2)
    assert position_lr(cfg, 100, 10.0) == pytest.approx(1e-3)
    assert position_lr(cfg, 500, 10.0) == pytest.approx(1e-3)


def test_split_views():
    assert split_views(8, 0) == (list(range(8)), [])
    assert split_views(8, 4) == ([0, 1, 2, 4, 5, 6], [3, 7])


def test_view_order_covers_every_view_each_epoch():
    views = [0, 2, 5, 7]
    order = view_order(views, np.random.default_rng(1))
    for _ in range(3):
        assert sorted(next(order) for _ in range(4)) == views


def test_baseline_loss_is_the_photometric_loss(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), quick_config)
    before = trainer.gaussians.copy()
    terms = trainer.total_loss(1)
    bundle = trainer.bundle
    expected, _ = photometric_loss(
        render(before, bundle.cameras[terms.view], bundle.background),
        bundle.images[terms.view],
        quick_config.theta,
    )
    assert terms.geo == 0.0
    assert terms.total == expected
    assert terms.photo == expected


def test_photometric_weight_is_linear(tiny_scene, quick_config):
    low = Trainer(fresh_bundle(tiny_scene), replace(quick_config, feature='planarity-knn', h_photo=0.01))
    high = Trainer(fresh_bundle(tiny_scene), replace(quick_config, feature='planarity-knn', h_photo=0.1))
    low_terms = low.total_loss(1)
    high_terms = high.total_loss(1)
    assert low_terms.view == high_terms.view
    assert low_terms.geo == high_terms.geo
    assert high_terms.total == pytest.approx(0.1 * high_terms.photo + high_terms.geo, rel=1e-12)

    np.testing.assert_allclose(high.gaussians.grads['colors'], 10.0 * low.gaussians.grads['colors'],
                               rtol=1e-9, atol=1e-15)
    _, geo = knn_loss_and_grad(PointCloud(low.gaussians.means), low.index, FeatureKind.PLANARITY_KNN)
    scale = np.abs(geo).max() + np.abs(high.gaussians.grads['means']).max()
    np.testing.assert_allclose(high.gaussians.grads['means'] - geo, 10.0 * (low.gaussians.grads['means'] - geo),
                               rtol=1e-6, atol=1e-9 * scale)


def test_coplanar_square_has_no_geometric_loss(tiny_scene, quick_config):
    square = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    gaussians = GaussianSet.from_points(square, np.full((4, 3), 0.5), np.full(4, 0.5))
    trainer = Trainer(fresh_bundle(tiny_scene, gaussians), replace(quick_config, feature='planarity-knn'))
    assert trainer.geometric_loss(1) == pytest.approx(0.0, abs=1e-12)
    assert trainer.index.k == 3


def test_gaussian_planarity_feeds_the_scales(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), replace(quick_config, feature='planarity-gaussian'))
    trainer.gaussians.zero_grad()
    loss = trainer.geometric_loss(1)
    assert loss == pytest.approx(1.0)
    assert trainer.index is None
    np.testing.assert_array_equal(trainer.gaussians.grads['means'], 0.0)


def test_zero_iterations_returns_the_input(tiny_scene, quick_config):
    bundle = fresh_bundle(tiny_scene)
    result = train(bundle, replace(quick_config, max_iterations=0))
    np.testing.assert_array_equal(result.gaussians.means, tiny_scene.bundle.gaussians.means)
    assert [record.iteration for record in result.metrics] == [0]
    assert result.stopped_at == 0
    assert result.stop_reason == 'max-iterations'
    assert result.target_reached is None
    assert math.isnan(result.metrics[0].total)
    assert result.metrics[0].chamfer_all > 0.0


def test_zero_target_stops_at_first_checkpoint(tiny_scene, quick_config):
    result = train(fresh_bundle(tiny_scene), replace(quick_config, target_psnr=0.0))
    assert result.stopped_at == quick_config.log_interval
    assert result.stop_reason == 'target-psnr'
    assert result.target_reached is True
    assert len(result.metrics) == 1


def test_unreachable_target(tiny_scene, quick_config):
    result = train(fresh_bundle(tiny_scene), replace(quick_config, target_psnr=200.0))
    assert result.stopped_at == quick_config.max_iterations
    assert result.stop_reason == 'max-iterations'
    assert result.target_reached is False
    assert [record.iteration for record in result.metrics] == [10, 20]


def test_training_is_deterministic(tiny_scene, quick_config):
    cfg = replace(quick_config, feature='planarity-knn')
    first = train(fresh_bundle(tiny_scene), cfg)
    second = train(fresh_bundle(tiny_scene), cfg)
    pd.testing.assert_frame_equal(first.metrics_frame(), second.metrics_frame())
    np.testing.assert_array_equal(first.gaussians.means, second.gaussians.means)


@pytest.mark.parametrize('feature', ['none', 'planarity-gaussian', 'planarity-knn', 'omnivariance-knn',
                                     'eigenentropy-knn'])
def test_every_feature_trains(feature, tiny_scene, quick_config):
    result = train(fresh_bundle(tiny_scene), replace(quick_config, feature=feature))
    frame = result.metrics_frame()
    assert list(frame.columns) == METRICS_COLUMNS
    assert np.all(np.isfinite(frame[['total', 'photo', 'geo', 'psnr', 'ssim']].to_numpy()))
    assert np.all(result.gaussians.opacities >= 1e-4 - 1e-12)
    np.testing.assert_allclose(np.linalg.norm(result.gaussians.rotations, axis=1), 1.0)
    if feature == 'none':
        assert np.all(frame['geo'] == 0.0)


def test_densify_without_candidates_changes_nothing(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), quick_config)
    before = trainer.gaussians.copy()
    after = trainer.densify_and_prune(5)
    assert len(after) == len(before)
    np.testing.assert_array_equal(after.means, before.means)


def test_prune_transparent(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), quick_config)
    n = len(trainer.gaussians)
    trainer.gaussians.opacity_logits[3] = inverse_sigmoid(0.001)
    kept = trainer.gaussians.means[np.arange(n) != 3]
    after = trainer.densify_and_prune(5)
    assert len(after) == n - 1
    np.testing.assert_array_equal(after.means, kept)


def test_split_large(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), quick_config)
    gaussians = trainer.gaussians
    n = len(gaussians)
    assert gaussians.scales[0].max() > quick_config.percent_dense * trainer.bundle.extent
    parent_scales = gaussians.scales[0].copy()
    trainer.grad_accum[0] = 1.0
    trainer.grad_count[0] = 1.0
    after = trainer.densify_and_prune(5)
    assert len(after) == n + 1
    np.testing.assert_allclose(after.scales[-2:], np.tile(parent_scales / 1.6, (2, 1)))
    np.testing.assert_array_equal(after.means[:n - 1], gaussians.means[1:])
    assert trainer.bundle.gaussians is after
    assert trainer.grad_accum.shape == (n + 1,)


def test_clone_small(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), quick_config)
    gaussians = trainer.gaussians
    n = len(gaussians)
    gaussians.log_scales[0] = np.log(0.05)
    trainer.grad_accum[0] = 1.0
    trainer.grad_count[0] = 2.0
    params = gaussians.parameters()
    trainer.optimizer.step(params, {name: np.ones_like(value) for name, value in params.items()},
                           trainer.learning_rates(1))
    original = trainer.gaussians.copy()
    after = trainer.densify_and_prune(5)
    assert len(after) == n + 1
    np.testing.assert_array_equal(after.means[:n], original.means)
    np.testing.assert_allclose(after.scales[-1], original.scales[0])
    for first, second in trainer.optimizer.moments.values():
        assert first.shape[0] == n + 1
        assert np.all(first[-1] == 0.0) and np.all(second[-1] == 0.0)


def test_non_finite_loss_is_reported(tiny_scene, quick_config, tmp_path):
    bundle = fresh_bundle(tiny_scene)
    bundle.gaussians.colors[:] = np.nan
    trainer = Trainer(bundle, quick_config, tmp_path)
    with pytest.raises(NonFiniteLossError) as err:
        trainer.run()
    assert err.value.dump_path is not None
    assert err.value.dump_path.is_file()
    assert err.value.dump_path.with_suffix('.npz').is_file()


def test_holdout_views(tiny_scene, quick_config):
    trainer = Trainer(fresh_bundle(tiny_scene), replace(quick_config, holdout_every=2))
    assert trainer.train_views == [0, 2]
    assert trainer.test_views == [1, 3]
    assert {trainer.total_loss(i).view for i in range(1, 7)} <= {0, 2}
    result = trainer.run()
    assert result.test_psnr is not None and result.test_psnr > 0.0


def test_outputs_and_summary(tiny_scene, quick_config, tmp_path):
    bundle = fresh_bundle(tiny_scene)
    cfg = replace(quick_config, feature='eigenentropy-knn', checkpoint_interval=10)
    result = Trainer(bundle, cfg, tmp_path).run()
    write_outputs(result, bundle, tmp_path)
    frame = pd.read_csv(tmp_path / METRICS_FILE)
    assert list(frame.columns) == METRICS_COLUMNS
    assert list(frame['iter']) == [10, 20]
    assert len(GaussianSet.load_ply(tmp_path / 'gaussians.ply')) == len(result.gaussians)
    for i in range(len(bundle.cameras)):
        assert (tmp_path / RENDER_DIR / f'view_{i:03d}.ppm').is_file()
    assert (tmp_path / CHECKPOINT_DIR / 'gaussians_000010.ply').is_file()

    summary = run_summary(result, cfg)
    assert summary['feature'] == 'eigenentropy-knn'
    assert summary['final_count'] == len(result.gaussians)
    assert summary['final_psnr'] == pytest.approx(frame['psnr'].iloc[-1])


def test_densify_threshold_ignores_scene_extent(tiny_scene, quick_config):
    bundle = fresh_bundle(tiny_scene)
    bundle.extent = 1000.0
    trainer = Trainer(bundle, quick_config)
    n = len(trainer.gaussians)
    trainer.grad_accum[0] = 1.5 * quick_config.densify_grad_threshold
    trainer.grad_count[0] = 1.0
    trainer.grad_accum[1] = 0.5 * quick_config.densify_grad_threshold
    trainer.grad_count[1] = 1.0
    after = trainer.densify_and_prune(5)
    assert len(after) == n + 1
    np.testing.assert_allclose(after.scales[-1], after.scales[0])
