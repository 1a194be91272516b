# dynsys.py
# Catalog of chaotic flows, fixed-step RK4 integration and preprocessing
# into normalized trajectory matrices.

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from chronoweft import settings
from chronoweft.errors import (
    ConfigError,
    DegenerateNormalizationError,
    DivergenceError,
    IntegrationError,
    ValidationError,
)

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray, float], np.ndarray]


# ------------------------
# Types
# ------------------------
@dataclass(frozen=True)
class SystemSpec:
    """A named autonomous ODE from the catalog"""

    name: str
    dim: int
    rhs: Callable[[np.ndarray, float, Mapping[str, float]], np.ndarray]
    params: Mapping[str, float]
    default_init_box: np.ndarray  # dim x 2, [low, high] per dimension
    alternate_params: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    role: str = "training"  # "training" or "target"

    def vector_field(self, x, t=0.0):
        return self.rhs(np.asarray(x, dtype=np.float64), t, self.params)

    def field(self) -> Field:
        params = self.params
        rhs = self.rhs
        return lambda x, t: rhs(x, t, params)

    def with_params(self, set_name):
        if set_name not in self.alternate_params:
            raise ConfigError(f"{self.name} has no parameter set '{set_name}'")
        return replace(self, params=dict(self.alternate_params[set_name]))


@dataclass(frozen=True)
class RawTrajectory:
    data: np.ndarray  # n_steps x D at integration resolution
    t0: float
    dt: float

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class TrajectoryMatrix:
    data: np.ndarray  # L_s x D, normalized to [0, 1]
    dt_effective: float
    norm_stats: np.ndarray  # 2 x D: row 0 = min, row 1 = max

    @property
    def length(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def window(self, start, length):
        return replace(self, data=self.data[start:start + length])


# ------------------------
# Vector fields
# ------------------------
def _aizawa(s, t, p):
    x, y, z = s
    return np.array([
        (z - p["b"]) * x - p["d"] * y,
        p["d"] * x + (z - p["b"]) * y,
        p["c"] + p["a"] * z - z ** 3 / 3.0 - (x * x + y * y) * (1.0 + p["e"] * z) + p["f"] * z * x ** 3,
    ])


def _bouali(s, t, p):
    x, y, z = s
    return np.array([
        x * (p["a"] - y) + p["alpha"] * z,
        -y * (p["b"] - x * x),
        -x * (p["c"] - p["s"] * z) - p["beta"] * z,
    ])


def _chua(s, t, p):
    x, y, z = s
    ht = p["mu1"] * x + 0.5 * (p["mu0"] - p["mu1"]) * (abs(x + 1.0) - abs(x - 1.0))
    return np.array([
        p["alpha"] * (y - x - ht),
        p["gamma"] * (x - y + z),
        -p["beta"] * y,
    ])


def _dadras(s, t, p):
    x, y, z = s
    return np.array([
        y - p["a"] * x + p["b"] * y * z,
        p["c"] * y - x * z + z,
        p["d"] * x * y - p["e"] * z,
    ])


def _four_wing(s, t, p):
    x, y, z = s
    return np.array([
        p["a"] * x + y * z,
        p["b"] * x + p["c"] * y - x * z,
        -z - x * y,
    ])


def _hastings_powell(s, t, p):
    v, h, q = s
    f1 = p["a1"] * v * h / (p["b1"] * v + 1.0)
    f2 = p["a2"] * h * q / (p["b2"] * h + 1.0)
    return np.array([
        v * (1.0 - v) - f1,
        f1 - f2 - p["d1"] * h,
        f2 - p["d2"] * q,
    ])


def _rikitake(s, t, p):
    x, y, z = s
    return np.array([
        -p["mu"] * x + z * y,
        -p["mu"] * y + x * (z - p["a"]),
        1.0 - x * y,
    ])


def _rossler(s, t, p):
    x, y, z = s
    return np.array([
        -(y + z),
        x + p["a"] * y,
        p["b"] + z * (x - p["c"]),
    ])


def _wang(s, t, p):
    x, y, z = s
    return np.array([
        x - y * z,
        x - y + x * z,
        -p["a"] * z + x * y,
    ])


def _food_chain(s, t, p):
    r, c, q = s
    uptake = r / (r + p["R0"])
    predation = c / (c + p["C0"])
    return np.array([
        r * (1.0 - r / p["K"]) - p["xc"] * p["yc"] * c * uptake,
        p["xc"] * c * (p["yc"] * uptake - 1.0) - p["xp"] * p["yp"] * q * predation,
        p["xp"] * q * (p["yp"] * predation - 1.0),
    ])


def _lorenz(s, t, p):
    x, y, z = s
    return np.array([
        p["sigma"] * (y - x),
        x * (p["rho"] - z) - y,
        x * y - p["beta"] * z,
    ])


_LV_RATES = np.array([1.0, 0.72, 1.53, 1.27])
_LV_INTERACTIONS = np.array([
    [1.0, 1.09, 1.52, 0.0],
    [0.0, 1.0, 0.44, 1.36],
    [2.33, 0.0, 1.0, 0.47],
    [1.21, 0.51, 0.35, 1.0],
])


def _lotka_volterra(s, t, p):
    return _LV_RATES * s * (1.0 - _LV_INTERACTIONS @ s)


# Sprott cases 0-18; each entry takes (x, y, z) and returns the derivative tuple.
_SPROTT = [
    lambda x, y, z: (y, -x + y * z, 1.0 - y * y),
    lambda x, y, z: (y * z, x - y, 1.0 - x * y),
    lambda x, y, z: (y * z, x - y, 1.0 - x * x),
    lambda x, y, z: (-y, x + z, x * z + 3.0 * y * y),
    lambda x, y, z: (y * z, x * x - y, 1.0 - 4.0 * x),
    lambda x, y, z: (y + z, -x + 0.5 * y, x * x - z),
    lambda x, y, z: (0.4 * x + z, x * z - y, -x + y),
    lambda x, y, z: (-y + z * z, x + 0.5 * y, x - z),
    lambda x, y, z: (-0.2 * y, x + z, x + y * y - z),
    lambda x, y, z: (2.0 * z, -2.0 * y + z, -x + y + y * y),
    lambda x, y, z: (x * y - z, x - y, x + 0.3 * z),
    lambda x, y, z: (y + 3.9 * z, 0.9 * x * x - y, 1.0 - x),
    lambda x, y, z: (-z, -x * x - y, 1.7 + 1.7 * x + y),
    lambda x, y, z: (-2.0 * y, x + z * z, 1.0 + y - 2.0 * z),
    lambda x, y, z: (y, x - z, x + x * z + 2.7 * y),
    lambda x, y, z: (2.7 * y + z, -x + y * y, x + y),
    lambda x, y, z: (-z, x - y, 3.1 * x + y * y + 0.5 * z),
    lambda x, y, z: (0.9 - y, 0.4 + z, x * y - z),
    lambda x, y, z: (-x - 4.0 * y, x + z * z, 1.0 + x),
]


def _sprott(case):
    f = _SPROTT[case]

    def rhs(s, t, p):
        return np.array(f(s[0], s[1], s[2]))

    rhs.__name__ = f"_sprott_{case}"
    return rhs


# ------------------------
# Catalog
# ------------------------
def _box(dim, low=0.0, high=1.0):
    return np.tile([low, high], (dim, 1)).astype(np.float64)


def _around(center, half_width):
    c = np.asarray(center, dtype=np.float64)
    return np.column_stack([c - half_width, c + half_width])


# Systems whose basin misses part of the unit cube. Most start next to a
# saddle-focus whose unstable spiral feeds the attractor.
_INIT_BOXES = {
    "chua": _around([0.7, 0.0, 0.0], 0.05),
    "sprott_3": np.array([[-0.5, -0.3], [-0.1, 0.1], [0.3, 0.5]]),
    "sprott_5": _around([0.0, 0.0, 0.0], 0.05),
    "sprott_6": _around([0.0, 0.0, 0.0], 0.05),
    "sprott_7": _around([0.0, 0.0, 0.0], 0.05),
    "sprott_8": _around([0.0, 0.0, 0.0], 0.05),
    "sprott_11": _around([0.0, 0.0, 0.0], 0.05),
    "sprott_12": _around([-0.7065, -0.4991, 0.0], 0.05),
    "sprott_14": _around([0.0, 0.0, 0.0], 0.05),
    "sprott_15": _around([0.0, 0.0, 0.0], 0.05),
}


def _init_box(name, dim=3):
    return _INIT_BOXES.get(name, _box(dim))


def _build_catalog():
    named = [
        ("aizawa", _aizawa, dict(a=0.95, b=0.7, c=0.6, d=3.5, e=0.25, f=0.1)),
        ("bouali", _bouali, dict(alpha=0.3, beta=0.05, a=4.0, b=1.0, c=1.5, s=1.0)),
        ("chua", _chua, dict(alpha=15.6, gamma=1.0, beta=28.0, mu0=-1.143, mu1=-0.714)),
        ("dadras", _dadras, dict(a=3.0, b=2.7, c=1.7, d=2.0, e=9.0)),
        ("four_wing", _four_wing, dict(a=0.2, b=0.01, c=-0.4)),
        ("hastings_powell", _hastings_powell, dict(a1=5.0, a2=0.1, b1=3.0, b2=2.0, d1=0.4, d2=0.01)),
        ("rikitake", _rikitake, dict(mu=2.0, a=5.0)),
        ("rossler", _rossler, dict(a=0.2, b=0.2, c=5.7)),
        ("wang", _wang, dict(a=3.0)),
    ]
    specs = [SystemSpec(name, 3, rhs, params, _init_box(name)) for name, rhs, params in named]
    specs += [SystemSpec(f"sprott_{k}", 3, _sprott(k), {}, _init_box(f"sprott_{k}"))
              for k in range(len(_SPROTT))]

    specs.append(SystemSpec(
        "food_chain", 3, _food_chain,
        dict(K=1.0, xc=0.4, yc=2.009, xp=0.08, yp=2.876, R0=0.16129, C0=0.5),
        _box(3, 0.3, 0.7), role="target",
    ))
    specs.append(SystemSpec(
        "lorenz", 3, _lorenz,
        dict(sigma=10.0, rho=28.0, beta=8.0 / 3.0),
        _box(3),
        alternate_params={"listed": dict(sigma=10.0, rho=2.67, beta=26.0)},
        role="target",
    ))
    specs.append(SystemSpec("lotka_volterra", 4, _lotka_volterra, {}, _box(4), role="target"))
    return specs


_CATALOG = _build_catalog()
_BY_NAME = {s.name: s for s in _CATALOG}

TARGETS = ("food_chain", "lorenz", "lotka_volterra")


def catalog():
    return list(_CATALOG)


def canonical_name(name):
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key not in _BY_NAME:
        raise ConfigError(f"unknown system '{name}'; valid: {', '.join(_BY_NAME)}")
    return key


def get_system(name):
    return _BY_NAME[canonical_name(name)]


def sample_initial_state(spec, rng):
    box = spec.default_init_box
    return rng.uniform(box[:, 0], box[:, 1])


# ------------------------
# Integration
# ------------------------
def rk4_step(field, x, t, dt):
    """Classical fourth-order Runge-Kutta step"""
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    k1 = field(x, t)
    if not np.all(np.isfinite(k1)):
        raise IntegrationError(x, t)
    k2 = field(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = field(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = field(x + dt * k3, t + dt)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError(x, t)
    return out


def simulate(spec, x0=None, n_steps=0, dt=settings.DT, seed=0, t0=0.0):
    """
    Integrate `spec` for n_steps RK4 steps.
    Row k of the result is the state after k+1 steps; x0 itself is not stored.
    When x0 is None it is drawn from the spec's init box with `seed`.
    """
    if x0 is None:
        x0 = sample_initial_state(spec, np.random.default_rng(seed))
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (spec.dim,):
        raise ValidationError(f"{spec.name}: x0 must have length {spec.dim}, got {x.shape}")

    out = np.empty((n_steps, spec.dim))
    f = spec.field()
    t = t0
    for k in range(n_steps):
        try:
            x = rk4_step(f, x, t, dt)
        except IntegrationError:
            raise DivergenceError(spec.name, k)
        if np.max(np.abs(x)) > settings.DIVERGENCE_BOUND:
            raise DivergenceError(spec.name, k)
        out[k] = x
        t += dt
    return RawTrajectory(out, t0, dt)


# ------------------------
# Preprocessing
# ------------------------
def normalize(data):
    """Per-column min-max normalization; returns (normalized, 2 x D stats)"""
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    span = hi - lo
    flat = np.flatnonzero(span <= 0)
    if flat.size:
        raise DegenerateNormalizationError(flat)
    return (data - lo) / span, np.vstack([lo, hi])


def preprocess(raw, transient_cut=settings.TRANSIENT_STEPS, subsample=settings.SUBSAMPLE,
               project_dims: Optional[Sequence[int]] = None):
    if subsample < 1:
        raise ValidationError(f"subsample must be >= 1, got {subsample}")
    if len(raw) <= transient_cut:
        raise ValidationError(f"trajectory of {len(raw)} rows is not longer than transient_cut={transient_cut}")

    data = raw.data[transient_cut::subsample]
    if project_dims is None and data.shape[1] > 3:
        project_dims = (0, 1, 2)
    if project_dims is not None:
        data = data[:, list(project_dims)]

    normed, stats = normalize(data)
    return TrajectoryMatrix(normed, raw.dt * subsample, stats)


def generate(spec, n_rows, seed=0, dt=settings.DT, subsample=settings.SUBSAMPLE,
             transient_steps=settings.TRANSIENT_STEPS, x0=None):
    """
    simulate -> preprocess with exactly n_rows output rows.
    Without an explicit x0, a draw that diverges is replaced by the next draw
    from the same seeded generator, up to settings.INIT_ATTEMPTS draws.
    """
    n_steps = transient_steps + subsample * n_rows
    logger.info("Simulating %s: %d steps (dt=%g)", spec.name, n_steps, dt)
    if x0 is not None:
        raw = simulate(spec, x0=x0, n_steps=n_steps, dt=dt)
    else:
        rng = np.random.default_rng(seed)
        for attempt in range(1, settings.INIT_ATTEMPTS + 1):
            try:
                raw = simulate(spec, x0=sample_initial_state(spec, rng), n_steps=n_steps, dt=dt)
                break
            except DivergenceError as e:
                if attempt == settings.INIT_ATTEMPTS:
                    raise
                logger.warning("%s (draw %d of %d); redrawing x0", e, attempt, settings.INIT_ATTEMPTS)
    traj = preprocess(raw, transient_steps, subsample)
    return TrajectoryMatrix(traj.data[:n_rows], traj.dt_effective, traj.norm_stats)

