#!/usr/bin/env python3
# Paired Study
# Trains a photometric-only baseline and each shape-feature run on the same
# synthetic scene and seed, under both stopping protocols, and writes one CSV
# row per run. With --h-photo the feature runs are repeated per weight.

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from eigensplat.cli import configure_logging
from eigensplat.config import SceneSpec, TrainConfig, load_scene_spec
from eigensplat.constants import FEATURE_NAMES, MAX_ITERATIONS, PHOTO_WEIGHT
from eigensplat.errors import EigensplatError
from eigensplat.scene import synth_scene
from eigensplat.trainer import TrainResult, train


logger = logging.getLogger('eigensplat')


def row(result: TrainResult, feature: str, seed: int, protocol: str, h_photo: float) -> dict:
    last = result.metrics[-1]
    return {
        'feature': feature,
        'seed': seed,
        'protocol': protocol,
        'h_photo': h_photo,
        'stopped_at': result.stopped_at,
        'target_reached': result.target_reached,
        'psnr': last.psnr,
        'ssim': last.ssim,
        'count': len(result.gaussians),
        'chamfer_masked': last.chamfer_masked,
        'chamfer_all': last.chamfer_all,
    }


def run_seed(spec: SceneSpec, cfg: TrainConfig, features: list[str], weights: list[float]) -> list[dict]:
    rows = []
    baseline = train(synth_scene(spec).bundle, replace(cfg, feature='none'))
    rows.append(row(baseline, 'none', cfg.seed, 'fixed-iterations', 1.0))
    for feature in features:
        for h_photo in weights:
            result = train(synth_scene(spec).bundle, replace(cfg, feature=feature, h_photo=h_photo))
            rows.append(row(result, feature, cfg.seed, 'fixed-iterations', h_photo))

            # Baseline again, stopped at the quality the feature run reached.
            target = result.metrics[-1].psnr
            matched = train(synth_scene(spec).bundle, replace(cfg, feature='none', target_psnr=target))
            rows.append(row(matched, 'none', cfg.seed, f'fixed-psnr:{feature}:{h_photo:g}', 1.0))
            rows.append(row(result, feature, cfg.seed, f'fixed-psnr:{feature}:{h_photo:g}', h_photo))
    return rows


def improvement(table: pd.DataFrame) -> pd.DataFrame:
    """
    Geometric-mean Chamfer ratio of every feature run against its paired baseline.
    """
    fixed = table[table['protocol'] == 'fixed-iterations']
    base = fixed[fixed['feature'] == 'none'].set_index('seed')
    runs = fixed[fixed['feature'] != 'none'].copy()
    for metric in ('chamfer_masked', 'chamfer_all', 'count'):
        runs[f'{metric}_ratio'] = runs[metric].to_numpy() / base.loc[runs['seed'], metric].to_numpy()
    return runs.groupby(['feature', 'h_photo']).agg(
        chamfer_masked_ratio=('chamfer_masked_ratio', lambda r: float(np.exp(np.mean(np.log(r))))),
        chamfer_all_ratio=('chamfer_all_ratio', lambda r: float(np.exp(np.mean(np.log(r))))),
        count_ratio=('count_ratio', 'mean'),
        psnr=('psnr', 'mean'),
    ).reset_index()


def main() -> int:
    parser = argparse.ArgumentParser(description='Paired baseline/feature study on a synthetic scene.')
    parser.add_argument('--spec', type=Path, help='scene spec file; textured cube defaults otherwise')
    parser.add_argument('--features', nargs='+', default=FEATURE_NAMES[1:], choices=FEATURE_NAMES[1:])
    parser.add_argument('--seeds', type=int, nargs='+', default=[1, 2, 3])
    parser.add_argument('--h-photo', type=float, nargs='+', default=[PHOTO_WEIGHT])
    parser.add_argument('--iters', type=int, default=2000, help=f'iteration budget (full runs use {MAX_ITERATIONS})')
    parser.add_argument('--out', type=Path, default=Path('paired-study.csv'))
    args = parser.parse_args()
    configure_logging(quiet=True)

    spec = load_scene_spec(args.spec) if args.spec else SceneSpec(kind='textured-cube')
    rows = []
    try:
        for seed in args.seeds:
            spec.seed = seed
            cfg = TrainConfig(max_iterations=args.iters, seed=seed, progress=False, checkpoint_interval=0)
            rows.extend(run_seed(spec, cfg, args.features, args.h_photo))
    except EigensplatError as err:
        logger.error(f'{err} | paired study stopped.')
        logger.exception(err)
        return 1

    table = pd.DataFrame(rows)
    table.to_csv(args.out, index=False)
    summary = improvement(table)
    summary.to_csv(args.out.with_name(f'{args.out.stem}_summary.csv'), index=False)
    print(summary.to_string(index=False))
    return 0


if __name__ == '__main__':
    sys.exit(main())
