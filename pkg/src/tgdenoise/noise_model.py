"""Forward corruption models and the analytic conditional score.

The additive Gaussian model is the one score-matching trains against; the
Poisson-Gaussian model simulates detector physics for data generation and
augmentation only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidNoiseMapError, ParameterError, SingularNoiseError


@dataclass
class GaussianNoiseParams:
    """Additive corruption level sigma_a >= 0."""

    sigma_a: float

    def __post_init__(self):
        if self.sigma_a < 0:
            raise ParameterError(f"sigma_a must be >= 0, got {self.sigma_a}")


@dataclass
class PoissonGaussianParams:
    """Electron-count gain, dark offset, and detector Gaussian std."""

    alpha: float = 50.0
    b: float = 0.0
    sigma_det: float = 0.05

    def __post_init__(self):
        if self.alpha <= 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.b < 0:
            raise ParameterError(f"b must be >= 0, got {self.b}")
        if self.sigma_det < 0:
            raise ParameterError(f"sigma_det must be >= 0, got {self.sigma_det}")


@dataclass
class SpatialNoiseMap:
    """Per-pixel noise level sigma(p) = a + b * value(p)."""

    a: float = 0.5
    b: float = 0.01


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def corrupt_gaussian(y: np.ndarray, p: GaussianNoiseParams, seed) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``y`` with i.i.d. Gaussian noise of std ``sigma_a``.

    Returns ``(x, u)`` with ``x = y + sigma_a * u`` and ``u`` the raw
    standard-normal draw, which doubles as the regression target for the
    denoising loss.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ParameterError("input contains non-finite values")
    u = _rng(seed).standard_normal(y.shape)
    return y + p.sigma_a * u, u


def conditional_score(x: np.ndarray, y: np.ndarray, sigma_a: float) -> np.ndarray:
    """Analytic score of the Gaussian corruption: -(x - y) / sigma_a**2."""
    if sigma_a == 0:
        raise SingularNoiseError("conditional score is singular at sigma_a = 0")
    if sigma_a < 0:
        raise ParameterError(f"sigma_a must be > 0, got {sigma_a}")
    return -(np.asarray(x) - np.asarray(y)) / sigma_a**2


def normalize_unit_range(y: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Affine-map an image to [0, 1] by its percentile range, clamping outside.

    A constant (or near-constant) image is clipped to [0, 1] as-is.
    """
    y = np.asarray(y, dtype=np.float64)
    lo, hi = np.percentile(y, [lo_pct, hi_pct])
    if hi - lo < 1e-12:
        return np.clip(y, 0.0, 1.0)
    return np.clip((y - lo) / (hi - lo), 0.0, 1.0)


def corrupt_poisson_gaussian(
    y: np.ndarray, p: PoissonGaussianParams, seed, normalize: bool = True
) -> np.ndarray:
    """Apply mixed Poisson-Gaussian corruption.

    The image is normalized to a nonnegative [0, 1] intensity ``yhat`` (unless
    ``normalize=False``, in which case ``alpha * y + b`` must already be
    nonnegative); the output is ``Poisson(alpha*yhat + b)/alpha - b/alpha``
    plus detector Gaussian noise, so its expectation is ``yhat`` and the shot
    variance is ``yhat/alpha + b/alpha**2``.
    """
    rng = _rng(seed)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ParameterError("input contains non-finite values")
    yhat = normalize_unit_range(y) if normalize else y
    rate = p.alpha * yhat + p.b
    if np.any(rate < 0):
        raise ParameterError("alpha * y + b is negative; normalize the input first")
    x = rng.poisson(rate).astype(np.float64) / p.alpha - p.b / p.alpha
    if p.sigma_det > 0:
        x = x + p.sigma_det * rng.standard_normal(y.shape)
    return x


def eval_noise_map(x: np.ndarray, m: SpatialNoiseMap) -> np.ndarray:
    """Evaluate the per-pixel noise level a + b*x; must be positive everywhere."""
    sigma = m.a + m.b * np.asarray(x, dtype=np.float64)
    if np.any(sigma <= 0):
        raise InvalidNoiseMapError(
            f"noise map non-positive: sigma in [{sigma.min():.4g}, {sigma.max():.4g}] "
            f"for a={m.a}, b={m.b}"
        )
    return sigma


def dsm_target_total_variance(sigma_a: float, n_samples: int, d: int, seed) -> float:
    """Empirical total variance of the per-sample regression target -u/sigma_a.

    Summed over ``d`` dimensions this scales as ``d / sigma_a**2``, which is
    the instability that motivates target-side supervision at low noise.
    """
    if sigma_a <= 0:
        raise ParameterError(f"sigma_a must be > 0, got {sigma_a}")
    u = _rng(seed).standard_normal((n_samples, d))
    target = -u / sigma_a
    return float(np.sum(np.var(target, axis=0)))
