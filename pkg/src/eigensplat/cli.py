#!/usr/bin/env python3
"""
Command line front end: synth, train, eval, render, features and compare.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .config import SceneSpec, load_run_config, load_scene_spec, save_run_config, RunConfig, TrainConfig
from .constants import \
    CHAMFER_THRESHOLD, \
    FEATURE_NAMES, \
    KNN, \
    MAX_ITERATIONS, \
    METRICS_COLUMNS, \
    METRICS_FILE, \
    PHOTO_WEIGHT, \
    DSSIM_WEIGHT, \
    RUN_DB_FILE
from .errors import EigensplatError, TooFewPointsError
from .gaussians import GaussianSet
from .metrics import chamfer
from .neighborhood import build_index, neighborhood_features
from .renderer import render
from .run_db import load_runs, record_run
from .scene import load_scene, synth_scene, write_scene
from .storage import load_cameras, read_point_cloud, write_image
from .trainer import Trainer, run_summary, write_outputs


logger = logging.getLogger('eigensplat')

LOG_FORMAT = '[%(levelname)s] -  ' \
             '%(name)s - ' \
             '(%(filename)s).%(funcName)s(%(lineno)d) - ' \
             '%(message)s'


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.INFO
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    logging.basicConfig(format=LOG_FORMAT, level=level, force=True)


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_scene_spec(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    scene = synth_scene(spec)
    write_scene(scene, args.out)
    run_path = Path(args.out) / 'train.cfg'
    if not run_path.exists():
        train_cfg = TrainConfig(seed=spec.seed)
        save_run_config(
            RunConfig(train=train_cfg, scene_dir=Path(args.out), output_dir=Path(args.out) / 'run'),
            run_path,
            relative_to=Path(args.out),
        )
    return 0


def _apply_overrides(cfg: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    overrides = {
        'feature': args.feature,
        'h_photo': args.h_photo,
        'k': args.k,
        'max_iterations': args.iters,
        'target_psnr': args.target_psnr,
        'seed': args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.no_progress:
        cfg.progress = False
    cfg.validate()
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    cfg = _apply_overrides(run.train, args)
    output_dir = Path(args.out) if args.out else run.output_dir
    bundle = load_scene(run.scene_dir, run.init_gaussians)
    logger.info(
        f'Training feature={cfg.feature} h_photo={cfg.h_photo} k={cfg.k} '
        f'iterations={cfg.max_iterations} target_psnr={cfg.target_psnr} seed={cfg.seed}'
    )
    result = Trainer(bundle, cfg, output_dir).run()
    write_outputs(result, bundle, output_dir)
    save_run_config(RunConfig(cfg, run.scene_dir, output_dir, run.init_gaussians), output_dir / 'run.cfg')
    record_run(
        output_dir / RUN_DB_FILE,
        output_dir.name,
        run_summary(result, cfg),
        [record.as_row() for record in result.metrics],
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    recon = read_point_cloud(args.recon, min_opacity=args.min_opacity)
    reference = read_point_cloud(args.ref)
    report = chamfer(recon, reference, args.threshold)
    out_dir = Path(args.out) if args.out else Path(args.recon).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.recon).stem
    report.write_csv(out_dir / f'{stem}_chamfer.csv')
    report.write_distance_ply(recon, out_dir / f'{stem}_distances.ply')
    for key, value in report.summary().items():
        print(f'{key}: {value:.6g}')
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    gaussians = GaussianSet.load_ply(args.gaussians)
    cameras = load_cameras(args.camera)
    if not 0 <= args.index < len(cameras):
        raise EigensplatError(f'Camera index {args.index} out of range for {len(cameras)} cameras')
    image = render(gaussians, cameras[args.index], np.asarray(args.background, dtype=np.float64))
    write_image(image, args.out)
    logger.info(f'Rendered {len(gaussians)} Gaussians to {args.out}')
    return 0


def cmd_features(args: argparse.Namespace) -> int:
    cloud = read_point_cloud(args.cloud)
    k = min(args.k, len(cloud) - 1)
    if k < args.k:
        logger.warning(f'Only {len(cloud)} points, using k={k}')
    if k < 3:
        raise TooFewPointsError(f'{len(cloud)} points are too few for neighborhood features')
    features = neighborhood_features(cloud, build_index(cloud, k))
    frame = pd.DataFrame({
        'x': cloud.positions[:, 0],
        'y': cloud.positions[:, 1],
        'z': cloud.positions[:, 2],
        **features,
    })
    out = Path(args.out) if args.out else Path(args.cloud).with_name(f'{Path(args.cloud).stem}_features.csv')
    frame.to_csv(out, index=False)
    logger.info(
        f'Mean planarity {frame["planarity"].mean():.4f}, omnivariance {frame["omnivariance"].mean():.4f}, '
        f'eigenentropy {frame["eigenentropy"].mean():.4f} over {len(frame)} points; wrote {out}'
    )
    return 0


def collect_runs(run_dirs: list[Path]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Summary table (one row per run) and long-format training curves of the
    given output directories.
    """
    summaries = []
    curves = []
    for run_dir in map(Path, run_dirs):
        ledger = run_dir / RUN_DB_FILE
        metrics_path = run_dir / METRICS_FILE
        if not ledger.is_file() or not metrics_path.is_file():
            raise EigensplatError(f'{run_dir} is not a training output directory')
        runs = load_runs(ledger)
        if not runs:
            raise EigensplatError(f'{ledger} holds no runs')
        meta = runs[-1]
        trace = pd.read_csv(metrics_path)
        missing = [column for column in METRICS_COLUMNS if column not in trace.columns]
        if missing:
            raise EigensplatError(f'{metrics_path} lacks columns {", ".join(missing)}')
        last = trace.iloc[-1] if len(trace) else None
        summaries.append({
            'run': run_dir.name,
            'feature': meta['feature'],
            'seed': meta['seed'],
            'protocol': 'fixed-psnr' if meta['target_psnr'] is not None else 'fixed-iterations',
            'target_psnr': meta['target_psnr'],
            'stopped_at': meta['stopped_at'],
            'target_reached': meta['target_reached'],
            'psnr': last['psnr'] if last is not None else np.nan,
            'ssim': last['ssim'] if last is not None else np.nan,
            'count': meta['final_count'],
            'chamfer_masked': last['chamfer_masked'] if last is not None else np.nan,
            'chamfer_all': last['chamfer_all'] if last is not None else np.nan,
        })
        curves.append(trace.assign(run=run_dir.name, feature=meta['feature'], seed=meta['seed']))

    table = pd.DataFrame(summaries)
    baseline = table[table['feature'] == 'none'].set_index(['seed', 'protocol'])
    for metric in ('chamfer_masked', 'chamfer_all', 'count'):
        reference = [
            baseline[metric].get((row.seed, row.protocol), np.nan) if len(baseline) else np.nan
            for row in table.itertuples()
        ]
        table[f'{metric}_vs_baseline'] = 1.0 - table[metric] / np.asarray(reference, dtype=np.float64)
    long = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame()
    return table, long


def cmd_compare(args: argparse.Namespace) -> int:
    table, curves = collect_runs(args.runs)
    print(table.to_string(index=False))
    if args.out:
        table.to_csv(args.out, index=False)
        logger.info(f'Wrote comparison table to {args.out}')
    if args.curves:
        curves.to_csv(args.curves, index=False)
        logger.info(f'Wrote training curves to {args.curves}')
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='eigensplat',
        description='Gaussian splatting regularized by eigenvalue shape features.',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='synthesize a scene directory',
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    synth.add_argument('--spec', type=Path, help='scene spec file ([scene] section); defaults when omitted')
    synth.add_argument('--out', type=Path, required=True, help='scene directory to write')
    synth.add_argument('--seed', type=int, help='override the spec seed')
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser('train', help='optimize Gaussians on a scene',
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    train.add_argument('--config', type=Path, required=True, help='run config ([train] and [paths])')
    train.add_argument('--feature', choices=FEATURE_NAMES, help='geometric loss (config default: none)')
    train.add_argument('--h-photo', type=float, help=f'photometric weight (default {PHOTO_WEIGHT})')
    train.add_argument('--k', type=int, help=f'neighbors per point (default {KNN})')
    train.add_argument('--iters', type=int, help=f'iteration budget (default {MAX_ITERATIONS})')
    train.add_argument('--target-psnr', type=float, help='stop once train-view PSNR reaches this (dB)')
    train.add_argument('--seed', type=int, help='random seed')
    train.add_argument('--out', type=Path, help='output directory (overrides [paths] output)')
    train.add_argument('--no-progress', action='store_true', help='hide the progress bar')
    train.epilog = f'D-SSIM weight theta defaults to {DSSIM_WEIGHT} and is set in the config file.'
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser('eval', help='Chamfer distance between two clouds',
                                   formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    evaluate.add_argument('--recon', type=Path, required=True, help='evaluated PLY (Gaussian centers)')
    evaluate.add_argument('--ref', type=Path, required=True, help='reference PLY')
    evaluate.add_argument('--threshold', type=float, default=CHAMFER_THRESHOLD, help='mask distance')
    evaluate.add_argument('--min-opacity', type=float, default=0.0,
                          help='drop Gaussians below this opacity first (0 = off)')
    evaluate.add_argument('--out', type=Path, help='report directory (default: next to --recon)')
    evaluate.set_defaults(handler=cmd_eval)

    render_cmd = commands.add_parser('render', help='render Gaussians from a camera',
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    render_cmd.add_argument('--gaussians', type=Path, required=True)
    render_cmd.add_argument('--camera', type=Path, required=True, help='camera file')
    render_cmd.add_argument('--index', type=int, default=0, help='camera to use from the file')
    render_cmd.add_argument('--background', type=float, nargs=3, default=[0.0, 0.0, 0.0])
    render_cmd.add_argument('--out', type=Path, required=True, help='.ppm or .png image')
    render_cmd.set_defaults(handler=cmd_render)

    features = commands.add_parser('features', help='per-point neighborhood shape features',
                                   formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    features.add_argument('--cloud', type=Path, required=True)
    features.add_argument('--k', type=int, default=KNN)
    features.add_argument('--out', type=Path, help='CSV path (default: <cloud>_features.csv)')
    features.set_defaults(handler=cmd_features)

    compare = commands.add_parser('compare', help='merge metrics of several runs',
                                  formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    compare.add_argument('--runs', type=Path, nargs='+', required=True, help='training output directories')
    compare.add_argument('--out', type=Path, help='write the table as CSV')
    compare.add_argument('--curves', type=Path, help='write all training curves as one long CSV')
    compare.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    Start of eigensplat
    :param argv:
    :return: process exit code
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except (EigensplatError, OSError) as err:
        logger.error(f'{err} | {args.command} failed.')
        logger.exception(err)
        return 1


if __name__ == '__main__':
    sys.exit(main())
