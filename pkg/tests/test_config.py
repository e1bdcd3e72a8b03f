from pathlib import Path

import pytest

from eigensplat.config import \
    RunConfig, \
    SceneSpec, \
    TrainConfig, \
    load_run_config, \
    load_scene_spec, \
    save_run_config, \
    save_scene_spec
from eigensplat.constants import DSSIM_WEIGHT, KNN, MAX_ITERATIONS, PHOTO_WEIGHT
from eigensplat.errors import ConfigError
from eigensplat.features import FeatureKind


def test_defaults():
    cfg = TrainConfig()
    assert cfg.h_photo == PHOTO_WEIGHT == 0.05
    assert cfg.theta == DSSIM_WEIGHT == 0.2
    assert cfg.k == KNN == 50
    assert cfg.max_iterations == MAX_ITERATIONS
    assert cfg.feature_kind is None
    assert cfg.densify_until == int(0.6 * MAX_ITERATIONS)


@pytest.mark.parametrize('overrides', [
    {'feature': 'curvature'},
    {'h_photo': 0.0},
    {'theta': 1.5},
    {'k': 2},
    {'max_iterations': -1},
    {'lr_color': 0.0},
    {'log_interval': 0},
    {'holdout_every': 1},
])
def test_invalid_train_config(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_feature_kind():
    assert TrainConfig(feature='omnivariance-knn').feature_kind is FeatureKind.OMNIVARIANCE_KNN


def test_scene_spec_round_trip(tmp_path):
    spec = SceneSpec(kind='manhattan-corner', extent=42.5, color_a=(0.1, 0.2, 0.3), seed=9)
    save_scene_spec(spec, tmp_path / 'scene.cfg')
    assert load_scene_spec(tmp_path / 'scene.cfg') == spec


def test_run_config_round_trip(tmp_path):
    (tmp_path / 'scene').mkdir()
    (tmp_path / 'scene' / 'start.ply').write_text('')
    train = TrainConfig(feature='planarity-knn', h_photo=0.1, target_psnr=25.5, max_iterations=300, seed=4)
    run = RunConfig(train, tmp_path / 'scene', tmp_path / 'out', tmp_path / 'scene' / 'start.ply')
    save_run_config(run, tmp_path / 'train.cfg', relative_to=tmp_path)
    text = (tmp_path / 'train.cfg').read_text()
    assert 'scene = scene' in text

    loaded = load_run_config(tmp_path / 'train.cfg')
    assert loaded.train == train
    assert loaded.scene_dir == tmp_path / 'scene'
    assert loaded.output_dir == tmp_path / 'out'
    assert loaded.init_gaussians == tmp_path / 'scene' / 'start.ply'

    save_run_config(loaded, tmp_path / 'again.cfg', relative_to=tmp_path)
    assert (tmp_path / 'again.cfg').read_text() == text


def test_hand_written_config(tmp_path):
    (tmp_path / 'scene').mkdir()
    path = tmp_path / 'train.cfg'
    path.write_text(
        '[train]\n'
        'feature = eigenentropy-knn  # regularizer\n'
        'max_iterations = 200\n'
        'progress = no\n'
        '[paths]\n'
        'scene = scene\n'
    )
    run = load_run_config(path)
    assert run.train.feature == 'eigenentropy-knn'
    assert run.train.max_iterations == 200
    assert run.train.progress is False
    assert run.train.target_psnr is None
    assert run.output_dir == tmp_path / 'run'
    assert run.init_gaussians is None


@pytest.mark.parametrize('body', [
    '[train]\nfeature = none\n',
    '[train]\nwarp_speed = 9\n[paths]\nscene = scene\n',
    '[train]\nmax_iterations = many\n[paths]\nscene = scene\n',
    '[train]\nk = 2.5\n[paths]\nscene = scene\n',
    '[paths]\nscene = missing\n',
    '[paths]\nscene = scene\ninit_gaussians = nowhere.ply\n',
    '[paths]\nscene = scene\nextra = 1\n',
])
def test_bad_run_configs(body, tmp_path):
    (tmp_path / 'scene').mkdir()
    path = tmp_path / 'train.cfg'
    path.write_text(body)
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / 'nothing.cfg')
    with pytest.raises(ConfigError):
        load_scene_spec(Path(tmp_path / 'nothing.cfg'))


def test_bad_scene_spec(tmp_path):
    path = tmp_path / 'scene.cfg'
    path.write_text('[scene]\nkind = sphere\n')
    with pytest.raises(ConfigError):
        load_scene_spec(path)
