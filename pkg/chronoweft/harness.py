# harness.py
# Experiment orchestration: plans, seeds, datasets, reconstruction sweeps,
# the transformer -> reservoir climate pipeline, leave-out rotations and
# the search objectives. Every stage seed derives from one master seed.

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import toml
from tqdm import tqdm

from chronoweft import dynsys, metrics, settings, storage
from chronoweft import reservoir as rc
from chronoweft import transformer as tf
from chronoweft.errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    InsufficientDataError,
    LeakageError,
)
from chronoweft.observe import ObservationSpec, apply_observation, gen_stochastic_signal

logger = logging.getLogger(__name__)

STOCHASTIC = "stochastic"
VALIDATION_SYSTEMS = ("sprott_0", "sprott_1")
NOISE_KINDS = ("multiplicative", "additive")
STAGES = ("sweep", "climate", "data_length", "transformer_hyper", "reservoir_grid")


# ------------------------
# Plans
# ------------------------
@dataclass
class ExperimentPlan:
    name: str = "experiment"
    train_systems: Optional[List[str]] = None  # None -> every catalog system not held out
    held_out: List[str] = field(default_factory=lambda: list(dynsys.TARGETS))
    profile: str = "desk"
    transformer: Dict[str, object] = field(default_factory=dict)  # overrides on the profile
    data_length: Optional[int] = None
    seed: int = 0
    output_dir: Optional[str] = None
    stages: List[str] = field(default_factory=lambda: ["sweep"])

    # reconstruction sweep
    lengths: List[int] = field(default_factory=lambda: [200])
    sparsities: List[float] = field(default_factory=lambda: [0.5, 0.8])
    noise_levels: List[float] = field(default_factory=lambda: [0.0])
    noise_kind: str = "multiplicative"
    realizations: int = 50
    include_stochastic: bool = False
    eval_length: int = 5000

    # climate pipeline
    climate_target: str = "lorenz"
    reservoir: str = "default"
    climate_segments: int = 3
    climate_train_length: int = 20_000
    climate_sparsity: float = 0.5
    climate_noise: float = 0.0
    warmup_length: int = 1000
    horizon: int = settings.LONG_HORIZON
    short_horizon: int = settings.SHORT_HORIZON

    # rotation
    group_size: int = 4

    # training sweeps: D_l grid and one-at-a-time transformer hyperparameters
    data_lengths: List[int] = field(default_factory=list)
    transformer_grid: Dict[str, List[object]] = field(default_factory=dict)
    models: int = 1  # independently seeded models per grid point

    # reservoir grid over (T_l, N_s)
    reservoir_train_lengths: List[int] = field(default_factory=list)
    reservoir_sizes: List[int] = field(default_factory=list)
    reservoir_realizations: int = 1

    def __post_init__(self):
        self.held_out = [dynsys.canonical_name(s) for s in self.held_out]
        if self.train_systems is None:
            self.train_systems = [s.name for s in dynsys.catalog() if s.name not in self.held_out]
        else:
            self.train_systems = [dynsys.canonical_name(s) for s in self.train_systems]
        leaked = set(self.train_systems) & set(self.held_out)
        if leaked:
            raise LeakageError(leaked)
        if not self.train_systems:
            raise ConfigError("training pool is empty")
        if self.realizations < 1:
            raise ConfigError(f"realizations must be >= 1, got {self.realizations}")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}, got '{self.noise_kind}'")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages: {', '.join(sorted(unknown))}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.models < 1 or self.reservoir_realizations < 1:
            raise ConfigError("models and reservoir_realizations must be >= 1")
        unknown = set(self.transformer_grid) - {f.name for f in fields(tf.TransformerConfig)}
        if unknown:
            raise ConfigError(f"unknown transformer_grid keys: {', '.join(sorted(unknown))}")
        if "data_length" in self.stages and not self.data_lengths:
            raise ConfigError("stage 'data_length' needs a data_lengths grid")
        if "transformer_hyper" in self.stages and not self.transformer_grid:
            raise ConfigError("stage 'transformer_hyper' needs a transformer_grid")
        if "reservoir_grid" in self.stages and not (self.reservoir_sizes and self.reservoir_train_lengths):
            raise ConfigError("stage 'reservoir_grid' needs reservoir_sizes and reservoir_train_lengths")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_toml(self):
        return toml.dumps(self.to_dict())

    @property
    def out_dir(self):
        return Path(self.output_dir) if self.output_dir else settings.OUTPUT_ROOT / self.name


SWEEP_PRESETS = {
    # reconstruction error over the (L_s, S_r) plane
    "length_sparsity": dict(name="length_sparsity", lengths=[50, 100, 200], sparsities=[0.1, 0.3, 0.5, 0.7, 0.9],
                 noise_levels=[0.05], realizations=50),
    # reservoir climate from reconstructed segments
    "climate": dict(name="climate", stages=["climate"], climate_target="lorenz", reservoir="lorenz"),
    # noise plane (sigma, S_r) at fixed length
    "noise_sparsity": dict(name="noise_sparsity", lengths=[200], sparsities=[0.1, 0.3, 0.5, 0.7, 0.9],
                 noise_levels=[0.0, 0.05, 0.1, 0.2], realizations=50),
    # Gaussian-filtered noise next to the held-out systems
    "stochastic": dict(name="stochastic", lengths=[200], sparsities=[0.5], noise_levels=[0.0],
                  include_stochastic=True, realizations=50),
    # retrain per training length D_l, scored over S_r
    "data_length": dict(name="data_length", stages=["data_length"], data_lengths=[2_000, 10_000, 50_000],
                        lengths=[200], sparsities=[0.1, 0.3, 0.5, 0.7, 0.9], realizations=20),
    # one transformer hyperparameter at a time around the profile
    "transformer_hyper": dict(name="transformer_hyper", stages=["transformer_hyper"], lengths=[200],
                              sparsities=[0.5], realizations=20,
                              transformer_grid=dict(embed_dim=[16, 32, 64], blocks=[1, 2, 3], heads=[1, 2, 4],
                                                    ffn_dim=[32, 64, 128], lr=[1e-4, 1e-3, 1e-2])),
    # climate DV over reservoir training length and size
    "reservoir_grid": dict(name="reservoir_grid", stages=["reservoir_grid"], reservoir="lorenz",
                           reservoir_train_lengths=[5_000, 10_000, 20_000], reservoir_sizes=[100, 200, 300, 500],
                           reservoir_realizations=5),
}

# Named after the figures they regenerate at desk scale.
SWEEP_PRESETS["fig4"] = {**SWEEP_PRESETS["length_sparsity"], "name": "fig4"}
SWEEP_PRESETS["fig5"] = {**SWEEP_PRESETS["reservoir_grid"], **SWEEP_PRESETS["climate"], "name": "fig5",
                         "stages": ["climate", "reservoir_grid"], "climate_sparsity": 0.8}
SWEEP_PRESETS["fig9"] = {**SWEEP_PRESETS["transformer_hyper"], "name": "fig9"}
SWEEP_PRESETS["fig12"] = dict(name="fig12", lengths=[50, 100, 150, 200, 250], sparsities=[0.8],
                              noise_levels=[0.05], realizations=50)


def plan_preset(name, **overrides):
    if name not in SWEEP_PRESETS:
        raise ConfigError(f"unknown sweep preset '{name}'; valid: {', '.join(SWEEP_PRESETS)}")
    return ExperimentPlan.from_mapping({**SWEEP_PRESETS[name], **overrides})


def load_plan(path):
    """A TOML file, or the name of a sweep preset"""
    if str(path) in SWEEP_PRESETS:
        return plan_preset(str(path))
    try:
        values = toml.load(str(path))
    except FileNotFoundError:
        raise ConfigError(f"plan file not found: {path}")
    except toml.TomlDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    preset = values.pop("preset", None)
    if preset is not None:
        return plan_preset(preset, **values)
    return ExperimentPlan.from_mapping(values)


def config_hash(plan):
    """First 16 hex chars of sha256 over canonical JSON (output location excluded)"""
    values = plan.to_dict() if isinstance(plan, ExperimentPlan) else dict(plan)
    values.pop("output_dir", None)
    blob = json.dumps(values, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def derive_seed(master, *labels):
    """Stable 63-bit seed for one stage / item of a run"""
    text = ":".join([str(master)] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def transformer_config(plan):
    overrides = dict(plan.transformer)
    if plan.data_length is not None:
        overrides["data_length"] = plan.data_length
    return tf.TransformerConfig.profile(plan.profile, **overrides)


def reservoir_config(plan, seed=None):
    """plan.reservoir is a preset name or a TOML path"""
    name = plan.reservoir if isinstance(plan, ExperimentPlan) else str(plan)
    if name in rc.RESERVOIR_PRESETS:
        cfg = rc.ReservoirConfig.preset(name)
    else:
        try:
            cfg = rc.ReservoirConfig.from_mapping(toml.load(name))
        except FileNotFoundError:
            raise ConfigError(f"reservoir config not found: {name}")
    return cfg if seed is None else replace(cfg, seed=seed)


# ------------------------
# Manifests
# ------------------------
def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seeds: Dict[str, int] = field(default_factory=dict)
    artifacts: Dict[str, Dict[str, str]] = field(default_factory=dict)
    train_systems: List[str] = field(default_factory=list)
    held_out: List[str] = field(default_factory=list)
    tool_version: str = settings.TOOL_VERSION

    def add(self, label, path):
        self.artifacts[label] = {"path": str(path), "sha256": file_sha256(path)}

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def audit_manifest(manifest):
    leaked = set(manifest.train_systems) & set(manifest.held_out)
    if leaked:
        raise LeakageError(leaked)
    return True


def verify_manifest(manifest):
    for label, entry in manifest.artifacts.items():
        path = Path(entry["path"])
        if not path.exists():
            raise FormatError(f"manifest artifact '{label}' missing: {path}")
        if file_sha256(path) != entry["sha256"]:
            raise FormatError(f"manifest artifact '{label}' hash mismatch: {path}")
    return True


# ------------------------
# Datasets
# ------------------------
@dataclass
class DatasetBuild:
    directory: Path
    files: Dict[str, Path] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)


def build_dataset(plan, directory=None):
    """simulate -> preprocess -> store, one file per training system"""
    directory = Path(directory) if directory else plan.out_dir / "data"
    directory.mkdir(parents=True, exist_ok=True)
    n_rows = transformer_config(plan).data_length
    build = DatasetBuild(directory)
    for name in tqdm(plan.train_systems, desc="dataset", disable=None):
        spec = dynsys.get_system(name)
        try:
            traj = dynsys.generate(spec, n_rows, seed=derive_seed(plan.seed, "data", name))
        except DivergenceError as e:
            logger.warning("Skipping %s: %s", name, e)
            build.skipped.append(name)
            continue
        path = directory / f"{name}.cwtj"
        storage.write_trajectory(path, traj)
        build.files[name] = path
    logger.info("Dataset: %d systems in %s (%d skipped)", len(build.files), directory, len(build.skipped))
    return build


def load_dataset(build):
    return {name: storage.read_trajectory(path) for name, path in build.files.items()}


def train_on_plan(plan, build, checkpoint_path=None):
    cfg = transformer_config(plan)
    data = load_dataset(build)
    regime = tf.TrainingRegime(
        systems=list(data), data_length=cfg.data_length, noise_sigma=cfg.noise_sigma,
        seed=plan.seed, held_out=plan.held_out, data=data,
    )
    return tf.train(regime, cfg, seed=derive_seed(plan.seed, "train"), checkpoint_path=checkpoint_path)


# ------------------------
# Reconstruction sweeps
# ------------------------
def target_trajectory(plan, name, n_rows=None):
    n_rows = n_rows or plan.eval_length
    if name == STOCHASTIC:
        return gen_stochastic_signal(n_rows, 3, settings.STOCHASTIC_KERNEL_SIGMA, seed=derive_seed(plan.seed, STOCHASTIC))
    return dynsys.generate(dynsys.get_system(name), n_rows, seed=derive_seed(plan.seed, "target", name))


def check_lengths(plan, max_len):
    for length in plan.lengths:
        if length > max_len:
            raise ConfigError(f"sweep length {length} exceeds model max_len {max_len}")


def run_realization(params, truth, length, sparsity, sigma, noise_kind, seed):
    """One mask draw on one window; everything follows from `seed`"""
    offset = int(np.random.default_rng([seed, 0]).integers(0, truth.length - length + 1))
    window = truth.window(offset, length)
    mult, add = (sigma, 0.0) if noise_kind == "multiplicative" else (0.0, sigma)
    sparse = apply_observation(window, ObservationSpec(sparsity, mult, add, seed))
    recon = tf.reconstruct(sparse, params)
    return {
        "offset": offset,
        "mse": metrics.mse(recon, window),
        "baseline_mse": metrics.mse(metrics.linear_interpolation_baseline(sparse), window.data),
    }


def run_reconstruction_sweep(plan, params, out_dir=None):
    """
    Per-realization rows plus one aggregate row per (system, L_s, S_r, sigma).
    Writes sweep.csv (both kinds) and sweep_summary.csv (aggregates only).
    """
    out_dir = Path(out_dir) if out_dir else plan.out_dir
    h = config_hash(plan)
    targets = list(plan.held_out) + ([STOCHASTIC] if plan.include_stochastic else [])
    check_lengths(plan, params.config.max_len)

    rows, aggregates = [], []
    for system in targets:
        truth = target_trajectory(plan, system, max(plan.eval_length, max(plan.lengths)))
        grid = [(L, s, sig) for L in plan.lengths for s in plan.sparsities for sig in plan.noise_levels]
        for length, sparsity, sigma in tqdm(grid, desc=f"sweep {system}", disable=None):
            point = []
            for r in range(plan.realizations):
                seed = derive_seed(plan.seed, "sweep", system, length, sparsity, sigma, r)
                result = run_realization(params, truth, length, sparsity, sigma, plan.noise_kind, seed)
                point.append(dict(
                    config_hash=h, row_kind="realization", system=system, length=length,
                    sparsity=sparsity, noise=sigma, noise_kind=plan.noise_kind,
                    realization=r, seed=seed, **result,
                ))
            mses = [p["mse"] for p in point]
            aggregates.append(dict(
                config_hash=h, row_kind="aggregate", system=system, length=length,
                sparsity=sparsity, noise=sigma, noise_kind=plan.noise_kind,
                n_realizations=len(point),
                mse=float(np.mean(mses)),
                mse_median=float(np.median(mses)),
                baseline_mse=float(np.median([p["baseline_mse"] for p in point])),
                recovery_stability=metrics.recovery_stability(mses, settings.MSE_THRESHOLD),
            ))
            rows.extend(point)
            logger.info("%s L=%d S_r=%.2f sigma=%.3f: median MSE %.5f", system, length, sparsity, sigma,
                        aggregates[-1]["mse_median"])

    frame = pd.DataFrame(rows + aggregates)
    summary = pd.DataFrame(aggregates)
    metrics.write_csv(frame, out_dir / "sweep.csv")
    metrics.write_csv(summary, out_dir / "sweep_summary.csv")
    return frame, summary


# ------------------------
# Training sweeps
# ------------------------
def training_data(plan, n_rows):
    """In-memory trajectories for the training pool; divergent systems are dropped"""
    data = {}
    for name in plan.train_systems:
        try:
            data[name] = dynsys.generate(dynsys.get_system(name), n_rows, seed=derive_seed(plan.seed, "data", name))
        except DivergenceError as e:
            logger.warning("Skipping %s: %s", name, e)
    if not data:
        raise InsufficientDataError("no training system could be simulated")
    return data


def score_held_out(plan, params, *labels):
    """Mean / median MSE per (held-out system, L_s, S_r, sigma) for one trained model"""
    check_lengths(plan, params.config.max_len)
    rows = []
    for system in plan.held_out:
        truth = target_trajectory(plan, system, max(plan.eval_length, max(plan.lengths)))
        for length in plan.lengths:
            for sparsity in plan.sparsities:
                for sigma in plan.noise_levels:
                    mses = [
                        run_realization(params, truth, length, sparsity, sigma, plan.noise_kind,
                                        derive_seed(plan.seed, *labels, system, length, sparsity, sigma, r))["mse"]
                        for r in range(plan.realizations)
                    ]
                    rows.append(dict(
                        system=system, length=length, sparsity=sparsity, noise=sigma,
                        mse=float(np.mean(mses)), mse_median=float(np.median(mses)),
                        recovery_stability=metrics.recovery_stability(mses, settings.MSE_THRESHOLD),
                    ))
    return rows


def train_models(plan, cfg, data, *labels):
    """Yield (index, params) for plan.models independently seeded trainings on `data`"""
    regime = tf.TrainingRegime(systems=list(data), data_length=cfg.data_length, noise_sigma=cfg.noise_sigma,
                               seed=plan.seed, held_out=plan.held_out, data=data)
    for m in range(plan.models):
        params, _ = tf.train(regime, cfg, seed=derive_seed(plan.seed, "train", *labels, m))
        yield m, params


def run_data_length_sweep(plan, out_dir=None):
    """
    Retrain at every D_l in plan.data_lengths and score the held-out systems.
    Shorter datasets are prefixes of the longest one. Writes data_length.csv.
    """
    out_dir = Path(out_dir) if out_dir else plan.out_dir
    h = config_hash(plan)
    base = transformer_config(plan)
    check_lengths(plan, base.max_len)
    longest = training_data(plan, max(plan.data_lengths))

    rows = []
    for n_rows in sorted(plan.data_lengths):
        data = {name: traj.window(0, n_rows) for name, traj in longest.items()}
        cfg = replace(base, data_length=n_rows)
        for m, params in train_models(plan, cfg, data, "data_length", n_rows):
            scored = score_held_out(plan, params, "data_length", n_rows, m)
            rows.extend(dict(config_hash=h, data_length=n_rows, model=m, **row) for row in scored)
            logger.info("D_l=%d model %d: mean MSE %.5f", n_rows, m, np.mean([r["mse"] for r in scored]))

    frame = pd.DataFrame(rows)
    metrics.write_csv(frame, out_dir / "data_length.csv")
    return frame


def run_transformer_hyper_sweep(plan, out_dir=None):
    """
    Vary one transformer hyperparameter at a time, the rest held at the plan's
    profile, and score the held-out systems. Writes transformer_hyper.csv.
    """
    out_dir = Path(out_dir) if out_dir else plan.out_dir
    h = config_hash(plan)
    base = transformer_config(plan)
    data = training_data(plan, base.data_length)
    # head dims follow embed_dim unless the plan pins them
    tied = {k: None for k in ("d_k", "d_v") if k not in plan.transformer}

    rows = []
    for key, values in plan.transformer_grid.items():
        for value in values:
            cfg = tf.TransformerConfig.from_mapping({**base.to_dict(), **tied, key: value})
            check_lengths(plan, cfg.max_len)
            for m, params in train_models(plan, cfg, data, "hyper", key, value):
                scored = score_held_out(plan, params, "hyper", key, value, m)
                rows.extend(dict(config_hash=h, parameter=key, value=value, model=m, **row) for row in scored)
                logger.info("%s=%s model %d: mean MSE %.5f", key, value, m, np.mean([r["mse"] for r in scored]))

    frame = pd.DataFrame(rows)
    metrics.write_csv(frame, out_dir / "transformer_hyper.csv")
    return frame


# ------------------------
# Climate pipeline
# ------------------------
@dataclass
class ClimateInputs:
    segments: list  # reconstructed (or ground-truth) training segments
    warmup: dynsys.TrajectoryMatrix
    future: dynsys.TrajectoryMatrix  # ground truth right after the last segment


@dataclass
class ClimateResult:
    report: metrics.EvalReport
    prediction: rc.ClosedLoopResult


def climate_inputs(plan, params=None):
    """
    Split a target trajectory into contiguous segments, observe each sparsely
    and reconstruct it. params=None feeds the clean segments directly.
    """
    if plan.climate_segments < 3:
        raise InsufficientDataError(f"climate pipeline needs >= 3 segments, got {plan.climate_segments}")
    n_rows = plan.climate_train_length + plan.horizon
    truth = target_trajectory(plan, plan.climate_target, n_rows)
    history = truth.window(0, plan.climate_train_length)
    future = truth.window(plan.climate_train_length, plan.horizon)

    segments = []
    for k, chunk in enumerate(np.array_split(history.data, plan.climate_segments)):
        seg = dynsys.TrajectoryMatrix(chunk, truth.dt_effective, truth.norm_stats)
        if params is not None:
            obs = ObservationSpec(plan.climate_sparsity, plan.climate_noise, 0.0, derive_seed(plan.seed, "climate", k))
            seg = tf.reconstruct_long(apply_observation(seg, obs), params)
        segments.append(seg)

    last = segments[-1]
    tail = min(plan.warmup_length, last.length)
    return ClimateInputs(segments, last.window(last.length - tail, tail), future)


def climate_score(plan, inputs, rc_cfg):
    model = rc.train_on_segments(inputs.segments, rc_cfg)
    prediction = rc.closed_loop_predict(model, inputs.warmup, plan.horizon)
    pred = prediction.trajectory.data
    truth = inputs.future.data
    short = min(plan.short_horizon, plan.horizon)

    err = metrics.mse(pred[:short], truth[:short]) if short else 0.0
    persistence = metrics.persistence_forecast(inputs.warmup.data[-1], short)
    report = metrics.EvalReport(
        mse=err,
        rmse=float(np.sqrt(err)),
        dv=metrics.deviation_value(pred, truth) if plan.horizon else None,
        metadata=dict(
            config_hash=config_hash(plan),
            system=plan.climate_target,
            segments=len(inputs.segments),
            reservoir_size=rc_cfg.size,
            horizon=plan.horizon,
            truncated=prediction.truncated,
            persistence_rmse=metrics.rmse(persistence, truth[:short]) if short else 0.0,
            surrogate_dv=metrics.deviation_value(metrics.shuffled_surrogate(truth, rc_cfg.seed), truth)
            if plan.horizon else None,
        ),
    )
    return ClimateResult(report, prediction)


def run_climate_pipeline(plan, params, rc_cfg=None, out_dir=None):
    """reconstruct segments -> train reservoir -> closed loop -> RMSE (short) and DV (long)"""
    rc_cfg = rc_cfg or reservoir_config(plan, seed=derive_seed(plan.seed, "reservoir"))
    result = climate_score(plan, climate_inputs(plan, params), rc_cfg)
    logger.info("Climate %s: RMSE(%d)=%.4f DV=%s truncated=%s", plan.climate_target, plan.short_horizon,
                result.report.rmse, result.report.dv, result.prediction.truncated)
    if out_dir is not None:
        out_dir = Path(out_dir)
        storage.write_trajectory(out_dir / "climate_prediction.cwtj", result.prediction.trajectory)
        metrics.write_csv(metrics.reports_to_frame([result.report]), out_dir / "climate.csv")
    return result


def run_reservoir_grid(plan, params=None, out_dir=None):
    """
    Climate scores over (T_l, N_s) with plan.reservoir_realizations reservoir
    seeds per cell. params=None trains on clean segments. Writes reservoir_grid.csv.
    """
    out_dir = Path(out_dir) if out_dir else plan.out_dir
    h = config_hash(plan)
    base = reservoir_config(plan)
    rows = []
    for train_length in plan.reservoir_train_lengths:
        sub = replace(plan, climate_train_length=train_length)
        inputs = climate_inputs(sub, params)
        for size in plan.reservoir_sizes:
            for r in range(plan.reservoir_realizations):
                cfg = replace(base, size=size, seed=derive_seed(plan.seed, "reservoir", train_length, size, r))
                report = climate_score(sub, inputs, cfg).report
                rows.append(dict(
                    config_hash=h, train_length=train_length, size=size, realization=r,
                    rmse=report.rmse, dv=report.dv,
                    persistence_rmse=report.metadata["persistence_rmse"],
                    surrogate_dv=report.metadata["surrogate_dv"],
                ))
            logger.info("T_l=%d N_s=%d: DV %s", train_length, size,
                        [row["dv"] for row in rows[-plan.reservoir_realizations:]])

    frame = pd.DataFrame(rows)
    metrics.write_csv(frame, out_dir / "reservoir_grid.csv")
    return frame


# ------------------------
# Leave-out rotation
# ------------------------
def leave_out_groups(names, group_size=4):
    names = list(names)
    return [names[i:i + group_size] for i in range(0, len(names), group_size)]


def rotate_leave_out(plan, out_dir=None):
    """Every catalog system is held out exactly once; one trained model per group"""
    out_dir = Path(out_dir) if out_dir else plan.out_dir / "rotation"
    names = [s.name for s in dynsys.catalog()]
    tables = []
    for k, group in enumerate(leave_out_groups(names, plan.group_size)):
        sub = replace(plan, name=f"{plan.name}_rot{k}", held_out=list(group), train_systems=None,
                      include_stochastic=False, output_dir=str(out_dir / f"rot{k}"))
        logger.info("Rotation %d: holding out %s", k, ", ".join(group))
        build = build_dataset(sub)
        params, _ = train_on_plan(sub, build)
        _, summary = run_reconstruction_sweep(sub, params)
        summary.insert(0, "rotation", k)
        tables.append(summary)

    table = pd.concat(tables, ignore_index=True)
    metrics.write_csv(table, out_dir / "rotation.csv")
    return table


# ------------------------
# Search objectives
# ------------------------
def transformer_objective(plan, realizations=5):
    """Train on the pool minus the validation systems, score mean MSE on them"""
    pool = [s for s in plan.train_systems if s not in VALIDATION_SYSTEMS]
    base = transformer_config(plan)
    data = {name: dynsys.generate(dynsys.get_system(name), base.data_length, seed=derive_seed(plan.seed, "data", name))
            for name in pool}
    validation = {name: target_trajectory(plan, name) for name in VALIDATION_SYSTEMS}

    def objective(config):
        cfg = tf.TransformerConfig.from_mapping({**base.to_dict(), **config, "d_k": None, "d_v": None})
        regime = tf.TrainingRegime(systems=pool, data_length=cfg.data_length, noise_sigma=cfg.noise_sigma,
                                   seed=plan.seed, held_out=list(VALIDATION_SYSTEMS), data=data)
        params, _ = tf.train(regime, cfg, seed=derive_seed(plan.seed, "search-train"))
        length = min(200, cfg.max_len)
        scores = [
            run_realization(params, truth, length, 0.5, 0.0, "multiplicative",
                            derive_seed(plan.seed, "search-val", name, r))["mse"]
            for name, truth in validation.items() for r in range(realizations)
        ]
        return float(np.mean(scores))

    return objective


def reservoir_objective(plan, params=None):
    """DV of the closed-loop climate for a sampled reservoir config"""
    inputs = climate_inputs(plan, params)
    base = reservoir_config(plan)

    def objective(config):
        cfg = rc.ReservoirConfig.from_mapping({**base.to_dict(), **config, "seed": derive_seed(plan.seed, "reservoir")})
        return climate_score(plan, inputs, cfg).report.dv

    return objective
