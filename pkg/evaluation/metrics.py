"""
Image quality metrics.

Full-reference: SSIM (Gaussian window, statistics over valid window positions
only) and MAE on [0, 1]-mapped images. Distribution-level: Fréchet distance
between Gaussian fits of features, and the kernel distance (unbiased MMD^2
under a cubic polynomial kernel) averaged over random subsets.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import signal

from main.exceptions import NumericalError, ParameterError, ShapeError
from main.logs import flowrestore_logger

# eigenvalues of the covariance product above -EIGEN_TOLERANCE * trace are rounding noise
EIGEN_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SsimSpec:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ParameterError(f'window_size must be a positive odd integer, got {self.window_size}')
        if self.window_sigma <= 0 or self.data_range <= 0:
            raise ParameterError('window_sigma and data_range must be positive')
        if self.c1 <= 0 or self.c2 <= 0:
            raise ParameterError('k1 and k2 must give positive stabilising constants')

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    def window(self):
        offsets = np.arange(self.window_size, dtype=np.float64) - (self.window_size - 1) / 2
        kernel = np.exp(-offsets ** 2 / (2 * self.window_sigma ** 2))
        kernel /= kernel.sum()
        return np.outer(kernel, kernel)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self):
        return self.mean.shape[0]


def check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f'images differ in shape: {a.shape} vs {b.shape}')
    return a, b


def ssim(a, b, spec=None):
    spec = spec or SsimSpec()
    a, b = check_pair(a, b)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ShapeError(f'ssim works on single-channel 2-D images, got {a.shape}')
    if min(a.shape) < spec.window_size:
        raise ParameterError(f'window {spec.window_size} is larger than image {a.shape}')

    window = spec.window()

    def local_mean(x):
        return signal.convolve2d(x, window, mode='valid')

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov_ab = local_mean(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + spec.c1) * (2 * cov_ab + spec.c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + spec.c1) * (var_a + var_b + spec.c2)
    return float(np.mean(numerator / denominator))


def mae_normed(a, b, value_range=(-1.0, 1.0)):
    """
    Mean absolute difference after mapping both images to [0, 1] with the one
    affine map that takes `value_range` onto [0, 1]. Images are not stretched
    to their own min and max, so a uniform intensity offset still counts.
    """
    a, b = check_pair(a, b)
    lo, hi = value_range
    return float(np.mean(np.abs(a - b)) / (hi - lo))


def fit_stats(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.ndim != 2:
        raise ShapeError(f'features must be an n x d matrix, got {features.shape}')
    if features.shape[0] < 2:
        raise ParameterError(f'need at least 2 feature rows, got {features.shape[0]}')

    mean = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return FeatureStats(mean=mean, cov=(cov + cov.T) / 2, count=features.shape[0])


def psd_sqrt(matrix, name):
    """ symmetric square root with rounding-level negative eigenvalues clamped """
    eigenvalues, eigenvectors = scipy.linalg.eigh(matrix)
    floor = -EIGEN_TOLERANCE * max(abs(np.trace(matrix)), np.finfo(np.float64).tiny)
    if eigenvalues.min(initial=0.0) < floor:
        raise NumericalError(
            f'{name} is not positive semi-definite',
            diagnostics={'min_eigenvalue': float(eigenvalues.min()), 'trace': float(np.trace(matrix))},
        )
    clamped = int(np.sum(eigenvalues < 0))
    if clamped:
        flowrestore_logger.info('%s: clamped %d negative eigenvalues (min %.3e)', name, clamped, eigenvalues.min())
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T, eigenvalues


def frechet_distance(p, q):
    """
    |mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2)). The trace of the
    product's root is taken from the symmetric S_p^(1/2) S_q S_p^(1/2), which
    has the same eigenvalues.
    """
    if p.dim != q.dim:
        raise ShapeError(f'feature dimensions differ: {p.dim} vs {q.dim}')

    root_p, _ = psd_sqrt(p.cov, 'first covariance')
    product = root_p @ q.cov @ root_p
    _, eigenvalues = psd_sqrt((product + product.T) / 2, 'covariance product')
    trace_root = float(np.sum(np.sqrt(eigenvalues)))

    diff = p.mean - q.mean
    distance = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2 * trace_root)
    return max(distance, 0.0)


def polynomial_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1) ** 3


def mmd2_unbiased(x, y):
    m = x.shape[0]
    k_xx = polynomial_kernel(x, x)
    k_yy = polynomial_kernel(y, y)
    k_xy = polynomial_kernel(x, y)
    within_x = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    within_y = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    return within_x + within_y - 2 * k_xy.sum() / (m * m)


def kid(features_a, features_b, subset_size=None, n_subsets=100, seed=0):
    """ (mean, std) of unbiased MMD^2 over `n_subsets` random subset pairs """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    if features_a.ndim != 2 or features_b.ndim != 2 or features_a.shape[1] != features_b.shape[1]:
        raise ShapeError(f'feature matrices do not match: {features_a.shape} vs {features_b.shape}')

    limit = min(features_a.shape[0], features_b.shape[0])
    subset_size = min(100, limit) if subset_size is None else subset_size
    if subset_size > limit:
        raise ParameterError(f'subset_size {subset_size} exceeds the smaller feature set ({limit})')
    if subset_size < 2:
        raise ParameterError(f'subset_size must be at least 2, got {subset_size}')
    if n_subsets < 1:
        raise ParameterError(f'n_subsets must be positive, got {n_subsets}')

    estimates = np.empty(n_subsets)
    for index in range(n_subsets):
        # one independent stream per subset index
        rng = np.random.default_rng([seed, index])
        a = features_a[rng.choice(features_a.shape[0], subset_size, replace=False)]
        b = features_b[rng.choice(features_b.shape[0], subset_size, replace=False)]
        estimates[index] = mmd2_unbiased(a, b)
    return float(estimates.mean()), float(estimates.std())


def format_kid(mean, std):
    return f'{mean:.6f} ± {std:.6f}'
