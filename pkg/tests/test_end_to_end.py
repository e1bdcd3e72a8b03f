from dataclasses import replace

import numpy as np
import pytest

from eigensplat.config import SceneSpec, TrainConfig
from eigensplat.constants import METRICS_FILE
from eigensplat.scene import synth_scene
from eigensplat.trainer import Trainer, train, write_outputs


STUDY_FEATURES = ['planarity-gaussian', 'planarity-knn', 'omnivariance-knn', 'eigenentropy-knn']


def study_config(feature: str, seed: int, **overrides) -> TrainConfig:
    return replace(TrainConfig(max_iterations=2000, log_interval=100, checkpoint_interval=0, progress=False),
                   feature=feature, seed=seed, **overrides)


def test_metrics_csv_is_reproducible(tiny_spec, quick_config, tmp_path):
    cfg = replace(quick_config, feature='omnivariance-knn')
    outputs = []
    for name in ('first', 'second'):
        scene = synth_scene(tiny_spec)
        result = train(scene.bundle, cfg)
        write_outputs(result, scene.bundle, tmp_path / name)
        outputs.append((tmp_path / name / METRICS_FILE).read_bytes())
    assert outputs[0] == outputs[1]


def test_baseline_trace_ignores_geometry_settings(tiny_spec, quick_config):
    plain = train(synth_scene(tiny_spec).bundle, quick_config)
    tuned = train(synth_scene(tiny_spec).bundle, replace(quick_config, k=5, knn_refresh=3, h_photo=0.5))
    np.testing.assert_array_equal(plain.metrics_frame().to_numpy(), tuned.metrics_frame().to_numpy())


@pytest.mark.slow
@pytest.mark.parametrize('kind', ['plane', 'box', 'manhattan-corner', 'textured-cube'])
def test_loss_decreases(kind):
    scene = synth_scene(SceneSpec(kind=kind, seed=1))
    trainer = Trainer(scene.bundle, replace(study_config('planarity-knn', 1), max_iterations=600))
    totals = []
    for i in range(1, 601):
        trainer.step(i)
        totals.append(trainer.last_terms.total)
    assert np.median(totals[:100]) > np.median(totals[-100:])


@pytest.mark.slow
def test_plane_knn_planarity_beats_baseline():
    spec = SceneSpec(kind='plane', seed=3)
    baseline = train(synth_scene(spec).bundle, study_config('none', 3))
    regularized = train(synth_scene(spec).bundle, study_config('planarity-knn', 3))
    assert regularized.metrics[-1].chamfer_masked < baseline.metrics[-1].chamfer_masked


@pytest.mark.slow
def test_paired_study_on_textured_cube():
    improvements = {feature: [] for feature in STUDY_FEATURES}
    for seed in (1, 2, 3):
        spec = SceneSpec(kind='textured-cube', camera_count=8, image_size=64, seed=seed)
        baseline = train(synth_scene(spec).bundle, study_config('none', seed))
        base = baseline.metrics[-1]
        for feature in STUDY_FEATURES:
            result = train(synth_scene(spec).bundle, study_config(feature, seed))
            last = result.metrics[-1]
            assert last.chamfer_masked < base.chamfer_masked
            assert last.chamfer_all <= 0.5 * base.chamfer_all
            assert len(result.gaussians) <= len(baseline.gaussians)
            improvements[feature].append(last.chamfer_masked / base.chamfer_masked)

            # Baseline stopped at the regularized run's PSNR is still worse geometrically.
            matched = train(synth_scene(spec).bundle, study_config('none', seed, target_psnr=last.psnr))
            assert matched.metrics[-1].chamfer_masked > last.chamfer_masked

    for feature, ratios in improvements.items():
        assert 1.0 - float(np.exp(np.mean(np.log(ratios)))) >= 0.15, feature
