# observe.py
# Measurement model: element-wise random masking, multiplicative and
# additive Gaussian noise, and the Gaussian-filtered noise signal used as
# a non-dynamical counterexample.

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import convolve1d

from chronoweft import settings
from chronoweft.dynsys import TrajectoryMatrix, normalize
from chronoweft.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObservationSpec:
    sparsity: float  # S_r, fraction of elements removed
    mult_noise_sigma: float = 0.0
    add_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValidationError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if self.mult_noise_sigma < 0 or self.add_noise_sigma < 0:
            raise ValidationError("noise sigmas must be >= 0")

    @property
    def observe_prob(self):
        return 1.0 - self.sparsity


@dataclass(frozen=True)
class SparseSeries:
    values: np.ndarray  # L_s x D, zeros where unobserved
    mask: np.ndarray  # L_s x D bool, True = observed
    spec: ObservationSpec
    dt_effective: float = settings.DT * settings.SUBSAMPLE
    norm_stats: Optional[np.ndarray] = None

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def observed_fraction(self):
        return float(self.mask.mean()) if self.mask.size else 0.0

    def window(self, start, length):
        return SparseSeries(
            self.values[start:start + length],
            self.mask[start:start + length],
            self.spec,
            self.dt_effective,
            self.norm_stats,
        )


def make_mask(rows, cols, sparsity, seed):
    if not 0.0 <= sparsity <= 1.0:
        raise ValidationError(f"sparsity must lie in [0, 1], got {sparsity}")
    rng = np.random.default_rng(seed)
    return _draw_mask(rng, (rows, cols), sparsity)


def _draw_mask(rng, shape, sparsity):
    # strict '<' keeps S_r=1 all-false and S_r=0 all-true
    return rng.random(shape) < (1.0 - sparsity)


def _noisy(x, mask, spec, rng):
    out = x.copy()
    if spec.mult_noise_sigma > 0:
        out = out * (1.0 + spec.mult_noise_sigma * rng.standard_normal(x.shape))
    if spec.add_noise_sigma > 0:
        out = out + spec.add_noise_sigma * rng.standard_normal(x.shape)
    return np.where(mask, out, 0.0)


def apply_observation(x, spec):
    """Mask then noise a full trajectory; one random stream seeded by spec.seed"""
    data = x.data if isinstance(x, TrajectoryMatrix) else np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    mask = _draw_mask(rng, data.shape, spec.sparsity)
    values = _noisy(data, mask, spec, rng)

    dt_effective = getattr(x, "dt_effective", settings.DT * settings.SUBSAMPLE)
    norm_stats = getattr(x, "norm_stats", None)
    return SparseSeries(values, mask, spec, dt_effective, norm_stats)


def observe_batch(segments, spec, rng=None):
    """
    Mask and noise a stacked B x L x D batch with a single random stream.
    Returns (values, mask) arrays of the same shape.
    """
    segments = np.asarray(segments, dtype=np.float64)
    if segments.ndim != 3:
        raise ValidationError(f"expected a B x L x D batch, got shape {segments.shape}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    mask = _draw_mask(rng, segments.shape, spec.sparsity)
    return _noisy(segments, mask, spec, rng), mask


# ------------------------
# Stochastic counterexample
# ------------------------
def gaussian_kernel(sigma, radius_factor=4.0):
    radius = int(np.ceil(radius_factor * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def gen_stochastic_signal(length, dims=3, kernel_sigma=settings.STOCHASTIC_KERNEL_SIGMA, seed=0,
                          dt_effective=settings.DT * settings.SUBSAMPLE):
    if length <= 6 * kernel_sigma:
        raise ValidationError(f"length {length} must exceed 6*kernel_sigma = {6 * kernel_sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(0.0, 1.0, size=(length, dims))
    smooth = convolve1d(noise, gaussian_kernel(kernel_sigma), axis=0, mode="reflect")
    normed, stats = normalize(smooth)
    logger.debug("Stochastic signal: %d x %d, sigma_g=%g", length, dims, kernel_sigma)
    return TrajectoryMatrix(normed, dt_effective, stats)
