"""
This file is part of eigensplat, eigenvalue-feature regularized Gaussian splatting.
Default values and numerical tolerances shared by every module.
"""
from pathlib import Path


# Numerical guards
EPS_SUM: float = 1e-12
EPS_DIV: float = 1e-12
EPS_LOG: float = 1e-12
NEGATIVE_EIGEN_SLACK: float = 1e-9

# Loss configuration
PHOTO_WEIGHT: float = 0.05
DSSIM_WEIGHT: float = 0.2
KNN: int = 50
KNN_REFRESH: int = 100

# Optimizer
MAX_ITERATIONS: int = 15_000
ADAM_BETAS: tuple[float, float] = (0.9, 0.999)
ADAM_EPS: float = 1e-15
LR_COLOR: float = 0.0025
LR_OPACITY: float = 0.05
LR_SCALE: float = 0.005
LR_ROTATION: float = 0.001
LR_POSITION_INIT: float = 1.6e-4
LR_POSITION_FINAL: float = 1.6e-6

# Densification
DENSIFY_INTERVAL: int = 100
DENSIFY_FROM: int = 500
DENSIFY_UNTIL_FRACTION: float = 0.6
DENSIFY_GRAD_THRESHOLD: float = 2e-4
PRUNE_OPACITY: float = 0.005
PERCENT_DENSE: float = 0.01
SPLIT_CHILDREN: int = 2
SPLIT_SCALE_DIVISOR: float = 1.6

# Parameter clamps
MIN_SCALE_FRACTION: float = 1e-6
MIN_OPACITY: float = 1e-4
MAX_OPACITY: float = 1.0 - 1e-4

# Renderer
NEAR_PLANE: float = 0.01
SCREEN_DILATION: float = 0.3
TRUNCATION_SIGMAS: float = 3.0
MIN_TRANSMITTANCE: float = 1e-4
SSIM_WINDOW: int = 11
SSIM_SIGMA: float = 1.5
SSIM_C1: float = 0.01 ** 2
SSIM_C2: float = 0.03 ** 2

# Metrics
PSNR_CAP: float = 120.0
MSE_FLOOR: float = 1e-12
CHAMFER_THRESHOLD: float = 10.0

# Logging / outputs
LOG_INTERVAL: int = 100
CHECKPOINT_INTERVAL: int = 1_000
METRICS_FILE = 'metrics.csv'
RUN_DB_FILE = 'runs.db'
RENDER_DIR = 'renders'
CHECKPOINT_DIR = 'checkpoints'
METRICS_COLUMNS: list[str] = [
    'iter', 'total', 'photo', 'geo', 'psnr', 'ssim', 'count', 'chamfer_all', 'chamfer_masked'
]

# Scene files written by `synth`
SCENE_SPEC_FILE = Path('scene.cfg')
CAMERAS_FILE = Path('cameras.cfg')
REFERENCE_FILE = Path('reference.ply')
INIT_GAUSSIANS_FILE = Path('init_gaussians.ply')
IMAGE_DIR = Path('images')

FEATURE_NAMES: list[str] = [
    'none',
    'planarity-gaussian',
    'planarity-knn',
    'omnivariance-knn',
    'eigenentropy-knn',
]
SCENE_KINDS: list[str] = ['plane', 'box', 'manhattan-corner', 'textured-cube']
