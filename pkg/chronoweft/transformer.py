# transformer.py
# Reconstruction transformer: sparse series -> projection + positional
# encoding -> post-norm encoder blocks -> linear head -> full trajectory.
# Trained on randomly drawn (system, length, sparsity) batches.

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from chronoweft import dynsys, settings, storage
from chronoweft import tensorcore as tc
from chronoweft.dynsys import TrajectoryMatrix
from chronoweft.errors import (
    ConfigError,
    FormatError,
    InsufficientDataError,
    LeakageError,
    OptimizerError,
    SequenceLengthError,
    ShapeError,
    TrainingAbortedError,
    ValidationError,
)
from chronoweft.observe import ObservationSpec, SparseSeries, observe_batch

logger = logging.getLogger(__name__)


# ------------------------
# Configuration
# ------------------------
@dataclass(frozen=True)
class TransformerConfig:
    input_dim: int = 3
    embed_dim: int = 32
    heads: int = 2
    blocks: int = 2
    ffn_dim: int = 64
    d_k: Optional[int] = None  # defaults to embed_dim
    d_v: Optional[int] = None  # defaults to embed_dim
    max_len: int = 256
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    smooth_weight: float = 0.1
    data_length: int = settings.DESK_DATA_LENGTH
    noise_sigma: float = 0.05
    loss_points: str = "all"  # "all" or "unobserved"
    positional_encoding: bool = True
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.embed_dim)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.embed_dim)
        if self.smooth_weight < 0:
            raise ConfigError("smooth_weight must be >= 0")
        if self.loss_points not in ("all", "unobserved"):
            raise ConfigError(f"loss_points must be 'all' or 'unobserved', got '{self.loss_points}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.embed_dim, self.heads, self.blocks, self.ffn_dim, self.max_len) < 1:
            raise ConfigError("embed_dim, heads, blocks, ffn_dim and max_len must all be >= 1")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown transformer config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    @classmethod
    def profile(cls, name, **overrides):
        if name not in PROFILES:
            raise ConfigError(f"unknown profile '{name}'; valid: {', '.join(PROFILES)}")
        return cls.from_mapping({**PROFILES[name], **overrides})

    def to_dict(self):
        return asdict(self)


PROFILES = {
    "desk": dict(
        embed_dim=32, heads=2, blocks=2, ffn_dim=64, max_len=256,
        data_length=settings.DESK_DATA_LENGTH, batch_size=16, epochs=20,
    ),
    "paper": dict(
        embed_dim=128, heads=4, blocks=4, ffn_dim=512, max_len=3000,
        data_length=settings.FULL_DATA_LENGTH, batch_size=16, epochs=50,
    ),
}
PROFILES["full"] = PROFILES["paper"]


@dataclass
class TransformerParams:
    config: TransformerConfig
    weights: Dict[str, np.ndarray]

    def names(self):
        return list(self.weights)

    def copy(self):
        return TransformerParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def count(self):
        return int(sum(v.size for v in self.weights.values()))


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    w = {}
    w["proj.W_p"] = tc.init_linear(cfg.input_dim, cfg.embed_dim, rng)
    w["proj.W_b"] = np.zeros(cfg.embed_dim)
    for b in range(cfg.blocks):
        p = f"block{b}"
        for h in range(cfg.heads):
            w[f"{p}.head{h}.W_Q"] = tc.init_linear(cfg.embed_dim, cfg.d_k, rng)
            w[f"{p}.head{h}.W_K"] = tc.init_linear(cfg.embed_dim, cfg.d_k, rng)
            w[f"{p}.head{h}.W_V"] = tc.init_linear(cfg.embed_dim, cfg.d_v, rng)
        w[f"{p}.W_o"] = tc.init_linear(cfg.heads * cfg.d_v, cfg.embed_dim, rng)
        w[f"{p}.ln1.gain"] = np.ones(cfg.embed_dim)
        w[f"{p}.ln1.bias"] = np.zeros(cfg.embed_dim)
        w[f"{p}.ffn.W_Fa"] = tc.init_linear(cfg.embed_dim, cfg.ffn_dim, rng)
        w[f"{p}.ffn.b_a"] = np.zeros(cfg.ffn_dim)
        w[f"{p}.ffn.W_Fb"] = tc.init_linear(cfg.ffn_dim, cfg.embed_dim, rng)
        w[f"{p}.ffn.b_b"] = np.zeros(cfg.embed_dim)
        w[f"{p}.ln2.gain"] = np.ones(cfg.embed_dim)
        w[f"{p}.ln2.bias"] = np.zeros(cfg.embed_dim)
    w["head.W"] = tc.init_linear(cfg.embed_dim, cfg.input_dim, rng)
    w["head.b"] = np.zeros(cfg.input_dim)
    return TransformerParams(cfg, w)


# ------------------------
# Model
# ------------------------
def positional_encoding(length, embed_dim, max_len=None):
    """PE[pos, 2d] = sin(pos / 10000^(2d/N)), PE[pos, 2d+1] = cos(...), pos from 0"""
    if max_len is not None and length > max_len:
        raise SequenceLengthError(length, max_len)
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(embed_dim)
    angle = pos / np.power(10000.0, (2 * (i // 2)) / embed_dim)
    pe = np.empty((length, embed_dim))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def _tensors(params, requires_grad=False):
    return {k: tc.Tensor(v, requires_grad=requires_grad) for k, v in params.weights.items()}


def _values_of(x):
    if isinstance(x, SparseSeries):
        return x.values
    if isinstance(x, TrajectoryMatrix):
        return x.data
    return np.asarray(x, dtype=np.float64)


def embed(values, params, tensors=None):
    """X_p = X~ W_p + W_b + PE; accepts L x D or B x L x D input"""
    cfg = params.config
    t = tensors or _tensors(params)
    x = tc.as_tensor(_values_of(values))
    length, width = x.shape[-2], x.shape[-1]
    if width != cfg.input_dim:
        raise ShapeError("embed", x.shape, (length, cfg.input_dim))
    if length > cfg.max_len:
        raise SequenceLengthError(length, cfg.max_len)
    out = (x @ t["proj.W_p"]) + t["proj.W_b"]
    if cfg.positional_encoding:
        out = out + positional_encoding(length, cfg.embed_dim)
    return out


def attention_head(x_p, W_Q, W_K, W_V, weights_out=None):
    """softmax(Q K^T / sqrt(d_k)) V with no causal mask"""
    x_p = tc.as_tensor(x_p)
    Q = x_p @ tc.as_tensor(W_Q)
    K = x_p @ tc.as_tensor(W_K)
    V = x_p @ tc.as_tensor(W_V)
    d_k = Q.shape[-1]
    attn = tc.softmax_rows(tc.scale(Q @ K.T, 1.0 / math.sqrt(d_k)))
    if weights_out is not None:
        weights_out.append(attn.data)
    return attn @ V


def encoder_block(x, params, index, tensors=None, training=False, rng=None, weights_out=None):
    """
    X_R1 = LN(X + Dropout(concat(heads) W_o))
    X_R2 = LN(X_R1 + Dropout(relu(X_R1 W_Fa + b_a) W_Fb + b_b))
    """
    cfg = params.config
    t = tensors or _tensors(params)
    p = f"block{index}"
    x = tc.as_tensor(x)

    heads = [
        attention_head(x, t[f"{p}.head{h}.W_Q"], t[f"{p}.head{h}.W_K"], t[f"{p}.head{h}.W_V"], weights_out)
        for h in range(cfg.heads)
    ]
    o = tc.concat(heads, axis=-1) @ t[f"{p}.W_o"]
    o = tc.dropout(o, cfg.dropout, rng, training)
    x_r1 = tc.layer_norm(x + o, t[f"{p}.ln1.gain"], t[f"{p}.ln1.bias"])

    hidden = tc.relu((x_r1 @ t[f"{p}.ffn.W_Fa"]) + t[f"{p}.ffn.b_a"])
    f = (hidden @ t[f"{p}.ffn.W_Fb"]) + t[f"{p}.ffn.b_b"]
    f = tc.dropout(f, cfg.dropout, rng, training)
    return tc.layer_norm(x_r1 + f, t[f"{p}.ln2.gain"], t[f"{p}.ln2.bias"])


def _forward_tensor(values, params, tensors, training=False, rng=None, weights_out=None):
    x = embed(values, params, tensors)
    for b in range(params.config.blocks):
        x = encoder_block(x, params, b, tensors, training, rng, weights_out)
    return (x @ tensors["head.W"]) + tensors["head.b"]


def forward(sparse, params, mode="eval", seed=None):
    """Returns an L x D (or B x L x D) array; eval mode is deterministic and records no graph"""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got '{mode}'")
    values = _values_of(sparse)
    if not np.all(np.isfinite(values)):
        raise ValidationError("sparse values must be finite")
    rng = np.random.default_rng(seed)
    out = _forward_tensor(values, params, _tensors(params), training=(mode == "train"), rng=rng)
    return out.data


def attention_maps(sparse, params):
    """Eval-mode attention weights, one L x L array per (block, head) in order"""
    maps = []
    _forward_tensor(_values_of(sparse), params, _tensors(params), weights_out=maps)
    return maps


# ------------------------
# Loss
# ------------------------
def loss(pred, truth, alpha_s=0.1, weights=None):
    """
    MSE + alpha_s * (Laplacian + total variation), each per dimension with
    its own normalization (1/L, 1/(L-2), 1/(L-1)) then averaged over
    dimensions and batch. Returns (value, d value / d pred).
    `weights` (same shape, 0/1) restricts the MSE term to selected points.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError("loss", pred.shape, truth.shape)
    length = pred.shape[-2]
    if length < 1:
        raise ValidationError("loss needs at least one time step")
    n_series = pred.size // length  # batch x dims

    diff = pred - truth
    if weights is None:
        mse_terms = (diff ** 2).mean(axis=-2)
        grad = 2.0 * diff / length
    else:
        w = np.asarray(weights, dtype=np.float64)
        count = w.sum(axis=-2, keepdims=True)
        safe = np.maximum(count, 1.0)
        mse_terms = (w * diff ** 2).sum(axis=-2) / safe[..., 0, :]
        grad = 2.0 * w * diff / safe

    total = mse_terms.sum()
    smooth_grad = np.zeros_like(pred)
    if length >= 3:
        second = pred[..., :-2, :] - 2.0 * pred[..., 1:-1, :] + pred[..., 2:, :]
        total += alpha_s * (second ** 2).sum() / (length - 2)
        g = 2.0 * second / (length - 2)
        smooth_grad[..., :-2, :] += g
        smooth_grad[..., 1:-1, :] -= 2.0 * g
        smooth_grad[..., 2:, :] += g
    if length >= 2:
        step = np.diff(pred, axis=-2)
        total += alpha_s * np.abs(step).sum() / (length - 1)
        s = np.sign(step) / (length - 1)
        smooth_grad[..., 1:, :] += s
        smooth_grad[..., :-1, :] -= s

    grad = (grad + alpha_s * smooth_grad) / n_series
    return total / n_series, grad


def loss_and_grads(params, values, truth, mask=None, training=False, rng=None):
    """Full-model loss and gradients for every named weight"""
    cfg = params.config
    tensors = _tensors(params, requires_grad=True)
    pred = _forward_tensor(values, params, tensors, training=training, rng=rng)
    weights = None
    if cfg.loss_points == "unobserved" and mask is not None:
        weights = ~np.asarray(mask, dtype=bool)
    value, grad = loss(pred.data, truth, cfg.smooth_weight, weights)
    pred.backward(grad)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return value, grads


# ------------------------
# Training
# ------------------------
@dataclass
class TrainingRegime:
    systems: Sequence[str]
    data_length: int = settings.DESK_DATA_LENGTH
    noise_sigma: float = 0.05
    seed: int = 0
    held_out: Sequence[str] = ()
    data: Optional[Dict[str, TrajectoryMatrix]] = None

    def __post_init__(self):
        self.systems = [dynsys.canonical_name(s) if self.data is None else s for s in self.systems]
        if not self.systems:
            raise ValidationError("training pool is empty")
        leaked = set(self.systems) & set(self.held_out)
        if leaked:
            raise LeakageError(leaked)

    def load(self):
        """Generated (or supplied) trajectory per pool system"""
        if self.data is not None:
            return {name: self.data[name] for name in self.systems}
        out = {}
        for k, name in enumerate(self.systems):
            spec = dynsys.get_system(name)
            out[name] = dynsys.generate(spec, self.data_length, seed=self.seed + k)
        return out


@dataclass
class TrainingLog:
    epoch_losses: List[float] = field(default_factory=list)
    steps_per_epoch: int = 0
    aborted: bool = False
    seconds: float = 0.0


def steps_per_epoch(cfg, n_systems, data_length):
    """Enough steps for the expected drawn points to cover data_length once per system"""
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    expected_points = cfg.batch_size * (1 + cfg.max_len) / 2.0
    return max(1, math.ceil(n_systems * data_length / expected_points))


def train(regime, cfg, seed=0, checkpoint_path=None):
    data = regime.load()
    names = list(data)
    for name, traj in data.items():
        if traj.length < cfg.max_len:
            raise InsufficientDataError(f"{name}: {traj.length} rows < max_len {cfg.max_len}")
        if traj.dim != cfg.input_dim:
            raise ShapeError(f"train[{name}]", traj.data.shape, (traj.length, cfg.input_dim))

    params = init_params(cfg, seed)
    tensors = {k: tc.Tensor(v, requires_grad=True) for k, v in params.weights.items()}
    optimizer = tc.Adam(tensors, lr=cfg.lr)
    rng = np.random.default_rng(seed)

    n_steps = steps_per_epoch(cfg, len(names), regime.data_length)
    log = TrainingLog(steps_per_epoch=n_steps)
    last_good = params.copy()
    started = time.perf_counter()
    logger.info("Training on %d systems: %d epochs x %d steps", len(names), cfg.epochs, n_steps)

    for epoch in range(cfg.epochs):
        total = 0.0
        for step in tqdm(range(n_steps), desc=f"epoch {epoch + 1}/{cfg.epochs}", disable=None, leave=False):
            traj = data[names[rng.integers(len(names))]].data
            length = int(rng.integers(1, cfg.max_len + 1))
            sparsity = float(rng.uniform(0.0, 1.0))
            offsets = rng.integers(0, traj.shape[0] - length + 1, size=cfg.batch_size)
            truth = traj[offsets[:, None] + np.arange(length)]
            values, mask = observe_batch(truth, ObservationSpec(sparsity, cfg.noise_sigma), rng)

            optimizer.zero_grad()
            pred = _forward_tensor(values, params, tensors, training=True, rng=rng)
            weights = ~mask if cfg.loss_points == "unobserved" else None
            value, grad = loss(pred.data, truth, cfg.smooth_weight, weights)
            if not np.isfinite(value):
                log.aborted = True
                raise TrainingAbortedError(epoch, step, last_good)
            pred.backward(grad)
            try:
                optimizer.step()
            except OptimizerError:
                log.aborted = True
                raise TrainingAbortedError(epoch, step, last_good)
            total += value

        log.epoch_losses.append(total / n_steps)
        last_good = params.copy()
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params)
        logger.info("Epoch %d/%d: mean loss %.6f", epoch + 1, cfg.epochs, log.epoch_losses[-1])

    log.seconds = time.perf_counter() - started
    return params, log


# ------------------------
# Inference
# ------------------------
def _output_stats(sparse, dim):
    stats = getattr(sparse, "norm_stats", None)
    if stats is None:
        return np.vstack([np.zeros(dim), np.ones(dim)])
    return stats


def reconstruct(sparse, params):
    out = forward(sparse, params, mode="eval")
    dt_effective = getattr(sparse, "dt_effective", settings.DT * settings.SUBSAMPLE)
    return TrajectoryMatrix(out, dt_effective, _output_stats(sparse, out.shape[-1]))


def reconstruct_long(sparse, params):
    """Tile non-overlapping max_len windows; the last window is aligned to the end"""
    max_len = params.config.max_len
    if sparse.length <= max_len:
        return reconstruct(sparse, params)
    out = np.empty_like(sparse.values)
    starts = list(range(0, sparse.length - max_len + 1, max_len))
    if starts[-1] + max_len < sparse.length:
        starts.append(sparse.length - max_len)
    for start in starts:
        out[start:start + max_len] = forward(sparse.window(start, max_len), params)
    return TrajectoryMatrix(out, sparse.dt_effective, _output_stats(sparse, out.shape[-1]))


# ------------------------
# Checkpoints
# ------------------------
def save_checkpoint(path, params):
    metadata = {"kind": "transformer", "config": params.config.to_dict(), "version": settings.TOOL_VERSION}
    storage.write_checkpoint(path, params.weights, metadata)


def load_checkpoint(path):
    weights, metadata = storage.read_checkpoint(path)
    if metadata.get("kind") != "transformer":
        raise FormatError(f"{path}: not a transformer checkpoint (kind={metadata.get('kind')!r})")
    cfg = TransformerConfig.from_mapping(metadata["config"])
    expected = init_params(cfg).weights
    for name, value in expected.items():
        if name not in weights or weights[name].shape != value.shape:
            raise FormatError(f"{path}: missing or misshapen tensor '{name}'")
    return TransformerParams(cfg, weights)