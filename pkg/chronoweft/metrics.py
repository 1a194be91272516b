# metrics.py
# Pointwise errors, recovery stability, occupancy histograms and the
# deviation value between attractors, plus the baselines they are
# compared against.

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from chronoweft import settings
from chronoweft.dynsys import TrajectoryMatrix
from chronoweft.errors import ShapeError, UndefinedMetricError, ValidationError, WindowMismatchError

logger = logging.getLogger(__name__)

UNIT_CUBE = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
CSV_FLOAT_FORMAT = "%.10g"


def _array(x):
    if isinstance(x, TrajectoryMatrix):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ------------------------
# Pointwise errors
# ------------------------
def mse(pred, truth):
    pred, truth = _array(pred), _array(truth)
    if pred.shape != truth.shape:
        raise ShapeError("mse", pred.shape, truth.shape)
    if pred.size == 0:
        raise UndefinedMetricError("mse of an empty trajectory is undefined")
    return float(np.mean((pred - truth) ** 2))


def rmse(pred, truth):
    return float(np.sqrt(mse(pred, truth)))


def recovery_stability(mse_list, threshold=settings.MSE_THRESHOLD):
    """Fraction of realizations whose MSE is strictly below threshold"""
    values = np.asarray(list(mse_list), dtype=np.float64)
    if values.size == 0:
        raise UndefinedMetricError("recovery stability needs at least one realization")
    if threshold <= 0:
        raise ValidationError(f"threshold must be > 0, got {threshold}")
    return float(np.mean(values < threshold))


# ------------------------
# Occupancy and deviation value
# ------------------------
@dataclass(frozen=True)
class OccupancyGrid:
    cell_size: float
    cells: tuple  # (m_x, m_y, m_z)
    freq: np.ndarray  # m_x x m_y x m_z visit frequencies
    overflow: float  # frequency of points outside bounds

    def total(self):
        return float(self.freq.sum() + self.overflow)


def _cells_per_axis(bounds, cell_size):
    return tuple(max(1, int(round((hi - lo) / cell_size))) for lo, hi in bounds)


def occupancy(traj, cell_size=settings.CELL_SIZE, bounds=UNIT_CUBE):
    """
    Visit frequencies on a cubic lattice. The upper edge of each axis is
    closed; points outside the bounds count toward one overflow bucket.
    """
    data = _array(traj)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ShapeError("occupancy", data.shape, (data.shape[0] if data.ndim else 0, 3))
    if data.shape[0] == 0:
        raise UndefinedMetricError("occupancy of an empty trajectory is undefined")
    if cell_size <= 0:
        raise ValidationError(f"cell size must be > 0, got {cell_size}")

    cells = _cells_per_axis(bounds, cell_size)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    inside = np.all((data >= lo) & (data <= hi), axis=1)

    idx = np.floor((data[inside] - lo) / cell_size).astype(np.int64)
    idx = np.minimum(idx, np.array(cells) - 1)
    flat = np.ravel_multi_index(idx.T, cells) if idx.size else np.empty(0, dtype=np.int64)
    counts = np.bincount(flat, minlength=int(np.prod(cells))).reshape(cells)

    n = data.shape[0]
    return OccupancyGrid(cell_size, cells, counts / n, float((~inside).sum()) / n)


def deviation_value(pred_traj, true_traj, cell_size=settings.CELL_SIZE, bounds=UNIT_CUBE, window=None):
    """L1 distance between occupancy frequencies, overflow bucket included"""
    pred, truth = _array(pred_traj), _array(true_traj)
    if window is not None:
        pred, truth = pred[:window], truth[:window]
    if pred.shape[0] != truth.shape[0]:
        raise WindowMismatchError(pred.shape[0], truth.shape[0])
    a = occupancy(pred, cell_size, bounds)
    b = occupancy(truth, cell_size, bounds)
    return float(np.abs(a.freq - b.freq).sum() + abs(a.overflow - b.overflow))


# ------------------------
# Baselines and surrogates
# ------------------------
def linear_interpolation_baseline(sparse):
    """
    Per-dimension linear interpolation over observed entries, constant past
    the first and last observation; a column with nothing observed is 0.5.
    """
    values, mask = sparse.values, sparse.mask
    out = np.empty_like(values)
    t = np.arange(values.shape[0])
    for j in range(values.shape[1]):
        seen = mask[:, j]
        if seen.any():
            out[:, j] = np.interp(t, t[seen], values[seen, j])
        else:
            out[:, j] = 0.5
    return out


def persistence_forecast(last_state, horizon):
    last_state = np.asarray(last_state, dtype=np.float64)
    return np.tile(last_state, (horizon, 1))


def shuffled_surrogate(traj, seed=0):
    """Permute each coordinate column independently; marginals kept, geometry destroyed"""
    data = _array(traj)
    rng = np.random.default_rng(seed)
    out = np.column_stack([rng.permutation(data[:, j]) for j in range(data.shape[1])])
    if isinstance(traj, TrajectoryMatrix):
        return TrajectoryMatrix(out, traj.dt_effective, traj.norm_stats)
    return out


# ------------------------
# Reports
# ------------------------
@dataclass
class EvalReport:
    mse: float
    rmse: float
    recovery_stability: Dict[float, float] = field(default_factory=dict)
    dv: Optional[float] = None
    n_realizations: int = 1
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.mse < 0 or (self.dv is not None and self.dv < 0):
            raise ValidationError("mse and dv must be >= 0")
        for rate in self.recovery_stability.values():
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"recovery stability {rate} outside [0, 1]")

    def to_row(self):
        row = dict(self.metadata)
        row.update(mse=self.mse, rmse=self.rmse, dv=self.dv, n_realizations=self.n_realizations)
        for threshold, rate in sorted(self.recovery_stability.items()):
            row[f"rs_{threshold:g}"] = rate
        return row


def reports_to_frame(reports):
    return pd.DataFrame([r.to_row() for r in reports])


def write_csv(frame, path):
    """Fixed float format and an atomic replace so identical runs give identical bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    frame.to_csv(tmp, index=False, float_format=CSV_FLOAT_FORMAT)
    os.replace(tmp, path)
    logger.info("Wrote %d rows to %s", len(frame), path)
    return path
