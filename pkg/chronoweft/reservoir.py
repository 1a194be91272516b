# reservoir.py
# Leaky echo-state network with a Tikhonov-regularized linear readout.
# Trained open loop on reconstructed segments, then run closed loop
# to generate long trajectories.

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from chronoweft import settings, storage
from chronoweft.dynsys import TrajectoryMatrix
from chronoweft.errors import (
    ConfigError,
    DegenerateReservoirError,
    FormatError,
    InsufficientDataError,
    RegularizationError,
    ShapeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DENSE_EIG_LIMIT = 2000


@dataclass(frozen=True)
class ReservoirConfig:
    size: int = 300
    leak: float = 0.30
    ridge: float = 10 ** -5.15
    input_scale: float = 1.82
    spectral_radius: float = 1.30
    density: float = 0.68
    train_noise: float = 10 ** -2.04
    washout: int = settings.WASHOUT
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError(f"reservoir size must be >= 1, got {self.size}")
        if not 0.0 < self.leak <= 1.0:
            raise ConfigError(f"leak must lie in (0, 1], got {self.leak}")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")
        if not 0.0 <= self.density <= 1.0:
            raise ConfigError(f"density must lie in [0, 1], got {self.density}")
        if self.washout < 0 or self.train_noise < 0:
            raise ConfigError("washout and train_noise must be >= 0")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown reservoir config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    @classmethod
    def preset(cls, name, **overrides):
        if name not in RESERVOIR_PRESETS:
            raise ConfigError(f"unknown reservoir preset '{name}'; valid: {', '.join(RESERVOIR_PRESETS)}")
        return cls.from_mapping({**RESERVOIR_PRESETS[name], **overrides})

    def to_dict(self):
        return asdict(self)


# Optimal values found per target system
RESERVOIR_PRESETS = {
    "food_chain": dict(leak=0.36, ridge=10 ** -1.25, input_scale=1.16, spectral_radius=1.29,
                       density=0.41, train_noise=10 ** -4.70),
    "lorenz": dict(leak=0.30, ridge=10 ** -5.15, input_scale=1.82, spectral_radius=1.30,
                   density=0.68, train_noise=10 ** -2.04),
    "lotka_volterra": dict(leak=0.29, ridge=10 ** -6.62, input_scale=0.19, spectral_radius=1.72,
                           density=0.02, train_noise=10 ** -2.73),
}
RESERVOIR_PRESETS["default"] = dict(RESERVOIR_PRESETS["lorenz"])


@dataclass(frozen=True)
class ReservoirModel:
    W_in: np.ndarray  # N_s x D_i
    A: scipy.sparse.csr_matrix  # N_s x N_s
    config: ReservoirConfig
    W_out: Optional[np.ndarray] = None  # D_o x N_s

    @property
    def size(self):
        return self.W_in.shape[0]

    @property
    def trained(self):
        return self.W_out is not None


@dataclass(frozen=True)
class ClosedLoopResult:
    trajectory: TrajectoryMatrix
    truncated: bool = False
    diverged_at: Optional[int] = None


# ------------------------
# Construction
# ------------------------
def spectral_radius(A):
    """Largest eigenvalue magnitude; dense eigvals for small matrices, ARPACK otherwise"""
    n = A.shape[0]
    if n <= DENSE_EIG_LIMIT:
        dense = A.toarray() if scipy.sparse.issparse(A) else np.asarray(A)
        return float(np.max(np.abs(np.linalg.eigvals(dense))))
    vals = scipy.sparse.linalg.eigs(scipy.sparse.csr_matrix(A), k=1, which="LM", return_eigenvectors=False)
    return float(np.abs(vals[0]))


def init_reservoir(cfg, input_dim=3):
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    W_in = rng.uniform(-cfg.input_scale, cfg.input_scale, size=(n, input_dim))
    links = rng.random((n, n)) < cfg.density
    A = scipy.sparse.csr_matrix(np.where(links, rng.standard_normal((n, n)), 0.0))
    if A.nnz == 0:
        raise DegenerateReservoirError(f"no recurrent links for size={n}, density={cfg.density}")

    radius = spectral_radius(A)
    if radius <= 0.0:
        raise DegenerateReservoirError("recurrence matrix has zero spectral radius")
    A = A * (cfg.spectral_radius / radius)
    logger.debug("Reservoir: N_s=%d, nnz=%d, radius %.4f -> %.4f", n, A.nnz, radius, cfg.spectral_radius)
    return ReservoirModel(W_in, scipy.sparse.csr_matrix(A), cfg)


# ------------------------
# Dynamics
# ------------------------
def advance(model, r, i):
    """r' = (1 - a) r + a tanh(A r + W_in i)"""
    a = model.config.leak
    return (1.0 - a) * r + a * np.tanh(model.A @ r + model.W_in @ i)


def _drive(model, inputs, r=None):
    """Open-loop states; row t is the state after consuming inputs[t]"""
    states = np.empty((inputs.shape[0], model.size))
    r = np.zeros(model.size) if r is None else r
    for t, i in enumerate(inputs):
        r = advance(model, r, i)
        states[t] = r
    return states


# ------------------------
# Readout
# ------------------------
def ridge_from_stats(RRT, URT, beta):
    """W_out solving W_out (R R^T + beta I) = U R^T through a Cholesky factorization"""
    RRT = np.asarray(RRT, dtype=np.float64)
    URT = np.asarray(URT, dtype=np.float64)
    if RRT.ndim != 2 or RRT.shape[0] != RRT.shape[1]:
        raise ShapeError("ridge_from_stats", RRT.shape, RRT.shape[::-1])
    if URT.ndim != 2 or URT.shape[1] != RRT.shape[0]:
        raise ShapeError("ridge_from_stats", URT.shape, RRT.shape)

    M = RRT + beta * np.eye(RRT.shape[0])
    if beta == 0 and np.linalg.matrix_rank(M) < M.shape[0]:
        raise RegularizationError("R R^T is singular; use ridge > 0")
    try:
        factor = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError:
        raise RegularizationError("R R^T + ridge*I is not positive definite; increase ridge")
    W_out = scipy.linalg.cho_solve(factor, URT.T).T
    if not np.all(np.isfinite(W_out)):
        raise RegularizationError("readout solve produced non-finite values; increase ridge")
    return W_out


def ridge_readout(R, U, beta):
    """R: N_s x T_l states, U: D_o x T_l targets"""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if R.shape[1] != U.shape[1]:
        raise ShapeError("ridge_readout", R.shape, U.shape)
    if R.shape[1] < 1:
        raise InsufficientDataError("ridge_readout needs at least one column")
    return ridge_from_stats(R @ R.T, U @ R.T, beta)


def train_on_segments(segments, cfg, model=None):
    """
    Each segment starts from r=0 and is driven with noisy inputs; after the
    washout, state r(t+1) is paired with target x[t+1]. Statistics from all
    segments feed a single ridge solve.
    """
    if not segments:
        raise InsufficientDataError("no training segments")
    dim = segments[0].data.shape[1]
    if model is None:
        model = init_reservoir(cfg, input_dim=dim)

    RRT = np.zeros((model.size, model.size))
    URT = np.zeros((dim, model.size))
    pairs = 0
    for k, seg in enumerate(segments):
        x = seg.data if isinstance(seg, TrajectoryMatrix) else np.asarray(seg, dtype=np.float64)
        if x.shape[1] != dim:
            raise ShapeError(f"train_on_segments[{k}]", x.shape, (x.shape[0], dim))
        usable = x.shape[0] - 1 - cfg.washout
        if usable < 1:
            logger.warning("Segment %d has %d rows, not enough past washout %d; skipped", k, x.shape[0], cfg.washout)
            continue

        rng = np.random.default_rng([cfg.seed, k])
        inputs = x[:-1] + cfg.train_noise * rng.standard_normal(x[:-1].shape)
        states = _drive(model, inputs)[cfg.washout:]
        targets = x[1 + cfg.washout:]
        RRT += states.T @ states
        URT += targets.T @ states
        pairs += states.shape[0]

    if pairs < 1:
        raise InsufficientDataError("no usable (state, target) pairs after washout")
    logger.info("Ridge readout from %d pairs over %d segments (N_s=%d)", pairs, len(segments), model.size)
    return replace(model, W_out=ridge_from_stats(RRT, URT, cfg.ridge))


def closed_loop_predict(model, warmup, horizon):
    """
    Drive with `warmup` open loop, then feed each output back for `horizon`
    steps. Outputs beyond +-OUTPUT_CLIP are clipped and flag truncation.
    """
    if not model.trained:
        raise ValidationError("reservoir readout has not been trained")
    data = warmup.data if isinstance(warmup, TrajectoryMatrix) else np.asarray(warmup, dtype=np.float64)
    if data.shape[0] < model.config.washout:
        raise InsufficientDataError(f"warmup of {data.shape[0]} rows is shorter than washout {model.config.washout}")

    r = _drive(model, data)[-1] if data.shape[0] else np.zeros(model.size)
    out = np.empty((horizon, model.W_out.shape[0]))
    truncated = False
    diverged_at = None
    o = model.W_out @ r
    for k in range(horizon):
        if np.max(np.abs(o)) > settings.OUTPUT_CLIP or not np.all(np.isfinite(o)):
            if not truncated:
                truncated = True
                diverged_at = k
                logger.warning("Closed-loop output left +-%g at step %d; clipping", settings.OUTPUT_CLIP, k)
            o = np.clip(np.nan_to_num(o, nan=0.0), -settings.OUTPUT_CLIP, settings.OUTPUT_CLIP)
        out[k] = o
        r = advance(model, r, o)
        o = model.W_out @ r

    dt_effective = getattr(warmup, "dt_effective", settings.DT * settings.SUBSAMPLE)
    stats = getattr(warmup, "norm_stats", None)
    if stats is None:
        stats = np.vstack([np.zeros(out.shape[1]), np.ones(out.shape[1])])
    return ClosedLoopResult(TrajectoryMatrix(out, dt_effective, stats), truncated, diverged_at)


# ------------------------
# Persistence
# ------------------------
def save_model(path, model):
    if not model.trained:
        raise ValidationError("refusing to save an untrained reservoir")
    coo = model.A.tocoo()
    tensors = {
        "W_in": model.W_in,
        "A.row": coo.row.astype(np.float64),
        "A.col": coo.col.astype(np.float64),
        "A.val": coo.data,
        "W_out": model.W_out,
    }
    metadata = {"kind": "reservoir", "config": model.config.to_dict(), "version": settings.TOOL_VERSION}
    storage.write_checkpoint(path, tensors, metadata)


def load_model(path):
    tensors, metadata = storage.read_checkpoint(path)
    if metadata.get("kind") != "reservoir":
        raise FormatError(f"{path}: not a reservoir checkpoint (kind={metadata.get('kind')!r})")
    cfg = ReservoirConfig.from_mapping(metadata["config"])
    n = tensors["W_in"].shape[0]
    A = scipy.sparse.coo_matrix(
        (tensors["A.val"], (tensors["A.row"].astype(np.int64), tensors["A.col"].astype(np.int64))),
        shape=(n, n),
    ).tocsr()
    return ReservoirModel(tensors["W_in"], A, cfg, tensors["W_out"])
