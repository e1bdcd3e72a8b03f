"""
Joint photometric and geometric optimization of a Gaussian set.

One iteration renders a single training view, adds the configured shape loss,
applies Adam per parameter group and, inside the densification window,
clones, splits and prunes Gaussians.
"""
import logging
import math
import tempfile
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import TrainConfig
from .constants import \
    ADAM_BETAS, \
    ADAM_EPS, \
    CHECKPOINT_DIR, \
    METRICS_COLUMNS, \
    METRICS_FILE, \
    RENDER_DIR, \
    SPLIT_CHILDREN, \
    SPLIT_SCALE_DIVISOR
from .errors import EmptyCloudError, NonFiniteLossError
from .features import FeatureKind
from .gaussians import GaussianSet, SceneBundle, clamp_parameters, gaussian_planarity_loss
from .metrics import chamfer, psnr, ssim
from .neighborhood import NeighborhoodIndex, PointCloud, build_index, knn_loss_and_grad
from .renderer import BackwardResult, backward, photometric_loss, project, rasterize, render
from .storage import write_image


logger = logging.getLogger('eigensplat')


@dataclass
class MetricsRecord:
    iteration: int
    total: float
    photo: float
    geo: float
    psnr: float
    ssim: float
    count: int
    chamfer_all: float
    chamfer_masked: float

    def as_row(self) -> dict[str, float]:
        return dict(zip(METRICS_COLUMNS, [
            self.iteration, self.total, self.photo, self.geo, self.psnr,
            self.ssim, self.count, self.chamfer_all, self.chamfer_masked,
        ]))


@dataclass
class LossTerms:
    total: float
    photo: float
    geo: float
    view: int
    backward: BackwardResult


@dataclass
class TrainResult:
    gaussians: GaussianSet
    metrics: list[MetricsRecord]
    stopped_at: int
    stop_reason: str
    target_reached: Optional[bool]
    test_psnr: Optional[float] = None

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([record.as_row() for record in self.metrics], columns=METRICS_COLUMNS)


class AdamOptimizer:
    """
    Adam over named parameter arrays; every name is its own group with its own
    learning rate and step count.
    """

    def __init__(self, betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.betas = betas
        self.eps = eps
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]):
        """
        Update `params` in place.
        :param params:
        :param grads:
        :param lrs: learning rate per parameter name
        :return:
        """
        beta1, beta2 = self.betas
        for name, lr in lrs.items():
            value = params[name]
            grad = grads[name]
            first, second = self.moments.get(name, (np.zeros_like(value), np.zeros_like(value)))
            first = beta1 * first + (1.0 - beta1) * grad
            second = beta2 * second + (1.0 - beta2) * grad * grad
            t = self.steps.get(name, 0) + 1
            first_hat = first / (1.0 - beta1 ** t)
            second_hat = second / (1.0 - beta2 ** t)
            value -= lr * first_hat / (np.sqrt(second_hat) + self.eps)
            self.moments[name] = (first, second)
            self.steps[name] = t

    def reindex(self, source: np.ndarray):
        """
        Follow a change of rows: row i of the new state copies old row
        source[i], or starts at zero where source[i] < 0.
        """
        fresh = source < 0
        safe = np.where(fresh, 0, source)
        for name, (first, second) in self.moments.items():
            first = first[safe]
            second = second[safe]
            first[fresh] = 0.0
            second[fresh] = 0.0
            self.moments[name] = (first, second)


def position_lr(cfg: TrainConfig, iteration: int, extent: float) -> float:
    """
    Log-linear decay from lr_position_init to lr_position_final over the run,
    in units of the scene extent.
    """
    t = min(max(iteration / max(cfg.max_iterations, 1), 0.0), 1.0)
    lr = math.exp((1.0 - t) * math.log(cfg.lr_position_init) + t * math.log(cfg.lr_position_final))
    return lr * extent


def view_order(views: list[int], rng: np.random.Generator) -> Iterator[int]:
    """
    Endless round robin over the views, reshuffled every epoch.
    """
    while True:
        for view in rng.permutation(views):
            yield int(view)


def split_views(count: int, holdout_every: int) -> tuple[list[int], list[int]]:
    """
    Every `holdout_every`-th view (1-based) is held out for testing; 0 keeps all views for training.
    """
    if holdout_every <= 1:
        return list(range(count)), []
    test = [i for i in range(count) if (i + 1) % holdout_every == 0]
    train = [i for i in range(count) if (i + 1) % holdout_every != 0]
    return train, test


class Trainer:
    """
    Owns the scene bundle for the duration of a run.
    """

    def __init__(self, bundle: SceneBundle, cfg: TrainConfig, output_dir: Optional[Path] = None):
        cfg.validate()
        self.bundle = bundle
        self.cfg = cfg
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.kind: Optional[FeatureKind] = cfg.feature_kind
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = AdamOptimizer()
        self.train_views, self.test_views = split_views(len(bundle.cameras), cfg.holdout_every)
        self.views = view_order(self.train_views, self.rng)
        self.index: Optional[NeighborhoodIndex] = None
        self.grad_accum = np.zeros(len(bundle.gaussians))
        self.grad_count = np.zeros(len(bundle.gaussians))
        self.metrics: list[MetricsRecord] = []
        self.last_terms: Optional[LossTerms] = None
        clamp_parameters(bundle.gaussians, bundle.extent)

    @property
    def gaussians(self) -> GaussianSet:
        return self.bundle.gaussians

    def _refresh_index(self, iteration: int) -> Optional[NeighborhoodIndex]:
        n = len(self.gaussians)
        if n < 4:
            self.index = None
            return None
        stale = self.index is None \
            or self.index.neighbors.shape[0] != n \
            or iteration - self.index.iteration >= self.cfg.knn_refresh
        if stale:
            k = min(self.cfg.k, n - 1)
            self.index = build_index(PointCloud(self.gaussians.means), k, iteration)
            logger.debug(f'Rebuilt neighbor index at iteration {iteration}: {n} points, k={k}')
        return self.index

    def geometric_loss(self, iteration: int) -> float:
        """
        Shape loss of the configured feature; its gradient goes into the means
        (neighborhood features) or the log-scales (Gaussian planarity).
        """
        gaussians = self.gaussians
        match self.kind:
            case None:
                return 0.0
            case FeatureKind.PLANARITY_GAUSSIAN:
                loss, _ = gaussian_planarity_loss(gaussians, squared=self.cfg.planarity_on_squared_scales)
                return loss
            case _:
                index = self._refresh_index(iteration)
                if index is None:
                    return 0.0
                loss, grad = knn_loss_and_grad(PointCloud(gaussians.means), index, self.kind)
                gaussians.grads['means'] += grad
                return loss

    def total_loss(self, iteration: int) -> LossTerms:
        """
        h_photo * photometric + geometric on the next training view, gradients
        accumulated into the Gaussian buffers. Without a feature the
        photometric loss is used on its own.
        :param iteration:
        :return:
        """
        gaussians = self.gaussians
        gaussians.zero_grad()
        view = next(self.views)
        cam = self.bundle.cameras[view]
        splats = project(gaussians, cam)
        image = rasterize(splats, cam, self.bundle.background)
        photo, grad_image = photometric_loss(image, self.bundle.images[view], self.cfg.theta)
        weight = 1.0 if self.kind is None else self.cfg.h_photo
        result = backward(grad_image, splats, gaussians, cam, self.bundle.background, weight)
        geo = self.geometric_loss(iteration)
        total = weight * photo + geo
        if not math.isfinite(total):
            self._dump_and_raise(iteration, total)
        return LossTerms(total, photo, geo, view, result)

    def _dump_and_raise(self, iteration: int, total: float):
        dump_dir = self.output_dir if self.output_dir is not None else Path(tempfile.mkdtemp(prefix='eigensplat-'))
        dump_path = dump_dir / f'nonfinite_{iteration:06d}.ply'
        try:
            self.gaussians.save_ply(dump_path)
            np.savez(dump_path.with_suffix('.npz'), **self.gaussians.grads)
        except OSError as err:
            logger.error(f'Could not write diagnostic dump to {dump_path}')
            logger.exception(err)
            dump_path = None
        raise NonFiniteLossError(f'Loss became {total} at iteration {iteration}', dump_path)

    def learning_rates(self, iteration: int) -> dict[str, float]:
        return {
            'means': position_lr(self.cfg, iteration, self.bundle.extent),
            'log_scales': self.cfg.lr_scale,
            'rotations': self.cfg.lr_rotation,
            'opacity_logits': self.cfg.lr_opacity,
            'colors': self.cfg.lr_color,
        }

    def is_log_iteration(self, iteration: int) -> bool:
        return iteration % self.cfg.log_interval == 0 or iteration == self.cfg.max_iterations

    def step(self, iteration: int) -> Optional[MetricsRecord]:
        """
        One optimization iteration. Returns the metrics record on logging
        iterations and None otherwise.
        :param iteration: 1-based iteration number
        :return:
        """
        terms = self.total_loss(iteration)
        self.last_terms = terms
        gaussians = self.gaussians

        if iteration < self.cfg.densify_until:
            visible = terms.backward.visible
            self.grad_accum[visible] += terms.backward.viewspace_grad_norm[visible]
            self.grad_count[visible] += 1

        self.optimizer.step(gaussians.parameters(), gaussians.grads, self.learning_rates(iteration))
        clamp_parameters(gaussians, self.bundle.extent)

        if self.cfg.densify_from <= iteration < self.cfg.densify_until \
                and iteration % self.cfg.densify_interval == 0:
            self.densify_and_prune(iteration)

        if self.is_log_iteration(iteration):
            record = self.evaluate(iteration, terms)
            self.metrics.append(record)
            return record
        return None

    def densify_and_prune(self, iteration: int) -> GaussianSet:
        """
        Clone small and split large Gaussians whose mean view-space gradient
        exceeds the threshold, then prune nearly transparent ones.
        :param iteration:
        :return: the new Gaussian set (also stored in the bundle)
        """
        gaussians = self.gaussians
        n = len(gaussians)
        mean_grad = self.grad_accum / np.maximum(self.grad_count, 1.0)
        selected = mean_grad > self.cfg.densify_grad_threshold
        largest = gaussians.scales.max(axis=1)
        small = selected & (largest <= self.cfg.percent_dense * self.bundle.extent)
        large = selected & ~small

        clone_ids = np.flatnonzero(small)
        split_ids = np.flatnonzero(large)
        clones = gaussians.select(clone_ids)
        clones.means = clones.means + self._sample_offsets(clones)

        children = gaussians.select(np.repeat(split_ids, SPLIT_CHILDREN))
        children.means = children.means + self._sample_offsets(children)
        children.log_scales = children.log_scales - math.log(SPLIT_SCALE_DIVISOR)

        keep_ids = np.flatnonzero(~large)
        grown = gaussians.select(keep_ids).extend(clones).extend(children)
        source = np.concatenate([keep_ids, np.full(len(clones) + len(children), -1)])

        alive = grown.opacities >= self.cfg.prune_opacity
        grown = grown.select(alive)
        source = source[alive]
        grown.zero_grad()

        self.optimizer.reindex(source)
        self.bundle.gaussians = grown
        self.grad_accum = np.zeros(len(grown))
        self.grad_count = np.zeros(len(grown))
        self.index = None
        logger.debug(
            f'Densified at iteration {iteration}: {clone_ids.size} cloned, {split_ids.size} split, '
            f'{int((~alive).sum())} pruned, {n} -> {len(grown)} Gaussians'
        )
        return grown

    def _sample_offsets(self, gaussians: GaussianSet) -> np.ndarray:
        if len(gaussians) == 0:
            return np.zeros((0, 3))
        local = self.rng.normal(size=(len(gaussians), 3)) * gaussians.scales
        return np.einsum('nij,nj->ni', gaussians.rotation_matrices(), local)

    def view_quality(self, views: list[int]) -> tuple[float, float]:
        """
        Mean PSNR and SSIM over the given views.
        """
        if not views:
            return math.nan, math.nan
        scores = []
        for view in views:
            image = render(self.gaussians, self.bundle.cameras[view], self.bundle.background)
            truth = self.bundle.images[view]
            scores.append((psnr(image, truth), ssim(image, truth)))
        values = np.array(scores)
        return float(values[:, 0].mean()), float(values[:, 1].mean())

    def geometry_quality(self) -> tuple[float, float]:
        """
        Chamfer (all points, masked) between the Gaussian centers and the reference.
        """
        if self.bundle.reference is None:
            return math.nan, math.nan
        keep = self.gaussians.opacities >= self.cfg.eval_min_opacity
        if not np.any(keep):
            logger.warning('No Gaussian passes the evaluation opacity filter')
            return math.nan, math.nan
        try:
            report = chamfer(PointCloud(self.gaussians.means[keep]), self.bundle.reference,
                             self.cfg.chamfer_threshold)
        except EmptyCloudError as err:
            logger.warning(f'Chamfer skipped: {err}')
            return math.nan, math.nan
        return report.mean_all, report.mean_masked

    def evaluate(self, iteration: int, terms: Optional[LossTerms] = None) -> MetricsRecord:
        view_psnr, view_ssim = self.view_quality(self.train_views)
        chamfer_all, chamfer_masked = self.geometry_quality()
        record = MetricsRecord(
            iteration=iteration,
            total=terms.total if terms else math.nan,
            photo=terms.photo if terms else math.nan,
            geo=terms.geo if terms else math.nan,
            psnr=view_psnr,
            ssim=view_ssim,
            count=len(self.gaussians),
            chamfer_all=chamfer_all,
            chamfer_masked=chamfer_masked,
        )
        logger.info(
            f'iter {iteration}: total {record.total:.6f} photo {record.photo:.6f} geo {record.geo:.6f} '
            f'psnr {record.psnr:.3f} ssim {record.ssim:.4f} count {record.count} '
            f'chamfer all {record.chamfer_all:.4f} masked {record.chamfer_masked:.4f}'
        )
        return record

    def save_checkpoint(self, iteration: int):
        if self.output_dir is None:
            return
        path = self.output_dir / CHECKPOINT_DIR / f'gaussians_{iteration:06d}.ply'
        self.gaussians.save_ply(path)
        logger.debug(f'Checkpoint {path}')

    def run(self) -> TrainResult:
        """
        Train until max_iterations or, with a target PSNR, until the first
        logged iteration whose train-view PSNR reaches it.
        :return:
        """
        cfg = self.cfg
        target = cfg.target_psnr
        stop_reason = 'max-iterations'
        stopped_at = cfg.max_iterations
        target_reached: Optional[bool] = None if target is None else False

        if cfg.max_iterations == 0:
            self.metrics.append(self.evaluate(0))
            if target is not None and self.metrics[-1].psnr >= target:
                target_reached = True
                stop_reason = 'target-psnr'
        else:
            iterations = tqdm(
                range(1, cfg.max_iterations + 1),
                desc=f'train {cfg.feature}',
                disable=not cfg.progress,
                leave=False,
            )
            for iteration in iterations:
                record = self.step(iteration)
                if cfg.checkpoint_interval and iteration % cfg.checkpoint_interval == 0:
                    self.save_checkpoint(iteration)
                if record is None:
                    continue
                iterations.set_postfix(psnr=f'{record.psnr:.2f}', count=record.count)
                if target is not None and record.psnr >= target:
                    target_reached = True
                    stop_reason = 'target-psnr'
                    stopped_at = iteration
                    break
            iterations.close()

        if target is not None and not target_reached:
            logger.warning(f'Target PSNR {target} dB not reached within {cfg.max_iterations} iterations')

        test_psnr = self.view_quality(self.test_views)[0] if self.test_views else None
        if test_psnr is not None:
            logger.info(f'Held-out PSNR over {len(self.test_views)} views: {test_psnr:.3f} dB')
        logger.info(f'Training stopped at iteration {stopped_at} ({stop_reason}) with {len(self.gaussians)} Gaussians')
        return TrainResult(
            gaussians=self.gaussians,
            metrics=self.metrics,
            stopped_at=stopped_at,
            stop_reason=stop_reason,
            target_reached=target_reached,
            test_psnr=test_psnr,
        )


def write_outputs(result: TrainResult, bundle: SceneBundle, output_dir: Path):
    """
    Metrics CSV, final Gaussian PLY and one final render per camera.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    result.metrics_frame().to_csv(output_dir / METRICS_FILE, index=False)
    result.gaussians.save_ply(output_dir / 'gaussians.ply')
    for i, cam in enumerate(bundle.cameras):
        write_image(render(result.gaussians, cam, bundle.background), output_dir / RENDER_DIR / f'view_{i:03d}.ppm')
    logger.info(f'Wrote metrics, Gaussians and {len(bundle.cameras)} renders to {output_dir}')


def run_summary(result: TrainResult, cfg: TrainConfig) -> dict:
    """
    Field values for the run ledger.
    """
    last = result.metrics[-1] if result.metrics else None
    return {
        'feature': cfg.feature,
        'seed': cfg.seed,
        'h_photo': cfg.h_photo,
        'k': cfg.k,
        'max_iterations': cfg.max_iterations,
        'target_psnr': cfg.target_psnr,
        'stop_reason': result.stop_reason,
        'stopped_at': result.stopped_at,
        'target_reached': result.target_reached,
        'final_psnr': last.psnr if last else None,
        'final_ssim': last.ssim if last else None,
        'final_count': len(result.gaussians),
        'chamfer_all': last.chamfer_all if last else None,
        'chamfer_masked': last.chamfer_masked if last else None,
        'test_psnr': result.test_psnr,
    }


def train(bundle: SceneBundle, cfg: TrainConfig, output_dir: Optional[Path] = None) -> TrainResult:
    return Trainer(bundle, cfg, output_dir).run()

