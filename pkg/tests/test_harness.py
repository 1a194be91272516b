import numpy as np
import pandas as pd
import pytest

from chronoweft import dynsys, harness, storage
from chronoweft import reservoir as rc
from chronoweft import transformer as tf
from chronoweft.errors import ConfigError, FormatError, InsufficientDataError, LeakageError


def tiny_params(max_len=16, seed=0):
    cfg = tf.TransformerConfig(embed_dim=8, heads=1, blocks=1, ffn_dim=8, max_len=max_len)
    return tf.init_params(cfg, seed)


def tiny_reservoir():
    return rc.ReservoirConfig(size=40, leak=0.5, ridge=1e-4, input_scale=0.5, spectral_radius=0.9,
                              density=0.2, train_noise=1e-3, washout=50, seed=1)


def sweep_plan(tmp_path, **overrides):
    values = dict(name="t", held_out=["lorenz"], lengths=[16], sparsities=[0.5, 0.8], noise_levels=[0.0],
                  realizations=5, eval_length=200, output_dir=str(tmp_path))
    values.update(overrides)
    return harness.ExperimentPlan(**values)


def climate_plan(tmp_path, **overrides):
    values = dict(name="c", stages=["climate"], climate_target="lorenz", climate_segments=3,
                  climate_train_length=1500, horizon=300, short_horizon=150, warmup_length=200,
                  output_dir=str(tmp_path))
    values.update(overrides)
    return harness.ExperimentPlan(**values)


# ------------------------
# Plans, hashes and seeds
# ------------------------
def test_default_pool_excludes_targets():
    plan = harness.ExperimentPlan()
    assert len(plan.train_systems) == 28
    assert not set(plan.train_systems) & set(dynsys.TARGETS)


def test_plan_rejects_leakage():
    with pytest.raises(LeakageError):
        harness.ExperimentPlan(train_systems=["sprott_0", "Lorenz"], held_out=["lorenz"])


def test_plan_rejects_unknown_keys_and_values():
    with pytest.raises(ConfigError):
        harness.ExperimentPlan.from_mapping({"name": "x", "colour": "blue"})
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(noise_kind="pink")
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(stages=["dance"])


def test_plan_toml_round_trip(tmp_path):
    plan = sweep_plan(tmp_path, transformer={"epochs": 1})
    path = tmp_path / "plan.toml"
    path.write_text(plan.to_toml())
    assert harness.load_plan(path).to_dict() == plan.to_dict()


def test_plan_presets(tmp_path):
    grid = harness.load_plan("length_sparsity")
    assert grid.lengths == [50, 100, 200]
    assert grid.noise_levels == [0.05]
    path = tmp_path / "p.toml"
    path.write_text('preset = "stochastic"\nrealizations = 3\n')
    plan = harness.load_plan(path)
    assert plan.include_stochastic and plan.realizations == 3
    with pytest.raises(ConfigError):
        harness.load_plan(tmp_path / "missing.toml")


def test_figure_presets():
    assert harness.load_plan("fig4").to_dict() == {**harness.load_plan("length_sparsity").to_dict(), "name": "fig4"}
    fig5 = harness.load_plan("fig5")
    assert fig5.stages == ["climate", "reservoir_grid"]
    assert fig5.climate_sparsity == 0.8 and fig5.reservoir == "lorenz"
    assert fig5.reservoir_sizes == [100, 200, 300, 500]
    fig9 = harness.load_plan("fig9")
    assert fig9.stages == ["transformer_hyper"]
    assert set(fig9.transformer_grid) == {"embed_dim", "blocks", "heads", "ffn_dim", "lr"}
    fig12 = harness.load_plan("fig12")
    assert fig12.sparsities == [0.8] and fig12.lengths == [50, 100, 150, 200, 250]


def test_plan_rejects_incomplete_grids():
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(stages=["data_length"])
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(stages=["transformer_hyper"])
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(stages=["reservoir_grid"], reservoir_sizes=[100])
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(transformer_grid={"wings": [1, 2]})
    with pytest.raises(ConfigError):
        harness.ExperimentPlan(models=0)


def test_config_hash_is_stable():
    a = harness.ExperimentPlan(name="x", output_dir="/tmp/a")
    b = harness.ExperimentPlan(name="x", output_dir="/tmp/b")
    h = harness.config_hash(a)
    assert len(h) == 16 and int(h, 16) >= 0
    assert h == harness.config_hash(b)
    assert h != harness.config_hash(harness.ExperimentPlan(name="x", seed=1))


def test_derive_seed():
    s = harness.derive_seed(0, "sweep", "lorenz", 200)
    assert s == harness.derive_seed(0, "sweep", "lorenz", 200)
    assert s != harness.derive_seed(0, "sweep", "lorenz", 201)
    assert s != harness.derive_seed(1, "sweep", "lorenz", 200)
    assert 0 <= s < 2 ** 63


def test_transformer_config_from_plan():
    plan = harness.ExperimentPlan(transformer={"epochs": 2, "embed_dim": 16}, data_length=500)
    cfg = harness.transformer_config(plan)
    assert (cfg.epochs, cfg.embed_dim, cfg.data_length, cfg.heads) == (2, 16, 500, 2)


def test_reservoir_config_from_plan(tmp_path):
    plan = harness.ExperimentPlan(reservoir="food_chain")
    assert harness.reservoir_config(plan).leak == 0.36
    assert harness.reservoir_config(plan, seed=7).seed == 7
    path = tmp_path / "rc.toml"
    path.write_text("size = 20\nleak = 0.5\n")
    assert harness.reservoir_config(str(path)).size == 20


# ------------------------
# Rotation groups
# ------------------------
def test_leave_out_groups_cover_catalog_once():
    names = [s.name for s in dynsys.catalog()]
    groups = harness.leave_out_groups(names, 4)
    assert len(groups) == 8
    assert len(groups[-1]) == 3
    flat = [n for g in groups for n in g]
    assert sorted(flat) == sorted(names)


# ------------------------
# Manifests
# ------------------------
def test_manifest_round_trip_and_audit(tmp_path):
    artifact = tmp_path / "a.bin"
    artifact.write_bytes(b"abc")
    manifest = harness.RunManifest("0123456789abcdef", seeds={"train": 5},
                                   train_systems=["sprott_0"], held_out=["lorenz"])
    manifest.add("data", artifact)
    path = manifest.write(tmp_path / "run.manifest.json")
    loaded = harness.RunManifest.read(path)
    assert loaded == manifest
    assert harness.audit_manifest(loaded)
    assert harness.verify_manifest(loaded)

    artifact.write_bytes(b"abd")
    with pytest.raises(FormatError):
        harness.verify_manifest(loaded)
    loaded.held_out.append("sprott_0")
    with pytest.raises(LeakageError):
        harness.audit_manifest(loaded)


# ------------------------
# Datasets
# ------------------------
def test_build_dataset_is_reproducible(tmp_path):
    plan = harness.ExperimentPlan(train_systems=["sprott_0", "sprott_5"], data_length=300,
                                  output_dir=str(tmp_path))
    first = harness.build_dataset(plan, tmp_path / "one")
    second = harness.build_dataset(plan, tmp_path / "two")
    assert set(first.files) == {"sprott_0", "sprott_5"}
    for name in first.files:
        assert first.files[name].read_bytes() == second.files[name].read_bytes()
    data = harness.load_dataset(first)
    assert data["sprott_0"].data.shape == (300, 3)
    assert data["sprott_0"].data.min() >= 0.0 and data["sprott_0"].data.max() <= 1.0


# ------------------------
# Reconstruction sweep
# ------------------------
def test_sweep_bookkeeping(tmp_path):
    plan = sweep_plan(tmp_path)
    frame, summary = harness.run_reconstruction_sweep(plan, tiny_params())
    per = frame[frame.row_kind == "realization"]
    assert len(per) == 2 * 5
    assert len(summary) == 2
    assert frame.config_hash.nunique() == 1
    assert frame.config_hash.iloc[0] == harness.config_hash(plan)
    assert set(summary.n_realizations) == {5}
    assert summary.recovery_stability.between(0, 1).all()
    assert (tmp_path / "sweep.csv").exists()
    assert len(pd.read_csv(tmp_path / "sweep_summary.csv")) == 2


def test_realization_is_reproducible_from_recorded_seed(tmp_path):
    plan = sweep_plan(tmp_path, sparsities=[0.5], realizations=2)
    params = tiny_params()
    frame, _ = harness.run_reconstruction_sweep(plan, params)
    row = frame[frame.row_kind == "realization"].iloc[1]
    truth = harness.target_trajectory(plan, "lorenz", plan.eval_length)
    again = harness.run_realization(params, truth, 16, 0.5, 0.0, "multiplicative", int(row.seed))
    assert again["offset"] == row.offset
    assert again["mse"] == pytest.approx(row.mse, rel=1e-9)


def test_sweep_is_byte_identical(tmp_path):
    params = tiny_params()
    harness.run_reconstruction_sweep(sweep_plan(tmp_path / "a", realizations=2), params)
    harness.run_reconstruction_sweep(sweep_plan(tmp_path / "b", realizations=2), params)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_sweep_with_stochastic_signal(tmp_path):
    plan = sweep_plan(tmp_path, sparsities=[0.5], realizations=2, include_stochastic=True)
    _, summary = harness.run_reconstruction_sweep(plan, tiny_params())
    assert set(summary.system) == {"lorenz", "stochastic"}


def test_sweep_length_above_max_len(tmp_path):
    with pytest.raises(ConfigError):
        harness.run_reconstruction_sweep(sweep_plan(tmp_path, lengths=[17]), tiny_params(max_len=16))


# ------------------------
# Climate pipeline
# ------------------------
def test_climate_inputs_split(tmp_path):
    inputs = harness.climate_inputs(climate_plan(tmp_path))
    assert len(inputs.segments) == 3
    assert sum(s.length for s in inputs.segments) == 1500
    assert inputs.warmup.length == 200
    assert inputs.future.length == 300
    np.testing.assert_array_equal(inputs.warmup.data, inputs.segments[-1].data[-200:])


def test_climate_needs_three_segments(tmp_path):
    with pytest.raises(InsufficientDataError):
        harness.climate_inputs(climate_plan(tmp_path, climate_segments=2))


def test_climate_pipeline_on_clean_segments(tmp_path):
    plan = climate_plan(tmp_path)
    result = harness.run_climate_pipeline(plan, None, tiny_reservoir(), out_dir=tmp_path)
    assert result.prediction.trajectory.data.shape == (300, 3)
    assert 0.0 <= result.report.dv <= 2.0
    assert "persistence_rmse" in result.report.metadata
    assert storage.read_trajectory(tmp_path / "climate_prediction.cwtj").length == 300
    again = harness.run_climate_pipeline(plan, None, tiny_reservoir())
    assert again.report.dv == result.report.dv


def test_climate_pipeline_through_reconstruction(tmp_path):
    plan = climate_plan(tmp_path)
    result = harness.run_climate_pipeline(plan, tiny_params(), tiny_reservoir())
    assert result.prediction.trajectory.length == 300
    assert np.all(np.isfinite(result.prediction.trajectory.data))


# ------------------------
# Training sweeps
# ------------------------
TINY_TRANSFORMER = {"epochs": 1, "max_len": 16, "steps_per_epoch": 2, "embed_dim": 8, "heads": 1, "blocks": 1,
                    "ffn_dim": 8}


def training_plan(tmp_path, **overrides):
    return sweep_plan(tmp_path, train_systems=["sprott_0", "sprott_5"], sparsities=[0.5], realizations=2,
                      transformer=dict(TINY_TRANSFORMER), data_length=200, **overrides)


def test_data_length_sweep(tmp_path):
    plan = training_plan(tmp_path, stages=["data_length"], data_lengths=[200, 100])
    frame = harness.run_data_length_sweep(plan)
    assert list(frame.data_length) == [100, 200]
    assert set(frame.system) == {"lorenz"}
    assert (frame.mse >= 0).all()
    assert frame.config_hash.iloc[0] == harness.config_hash(plan)
    assert len(pd.read_csv(tmp_path / "data_length.csv")) == 2


def test_transformer_hyper_sweep(tmp_path):
    plan = training_plan(tmp_path, stages=["transformer_hyper"], models=2,
                         transformer_grid={"embed_dim": [4, 12], "lr": [1e-2]})
    frame = harness.run_transformer_hyper_sweep(plan)
    assert len(frame) == 3 * 2
    assert list(frame.parameter.unique()) == ["embed_dim", "lr"]
    assert sorted(frame[frame.parameter == "embed_dim"].value.unique()) == [4, 12]
    assert set(frame.model) == {0, 1}
    # independently seeded models give different scores
    first = frame[(frame.parameter == "lr")]
    assert first.mse.iloc[0] != first.mse.iloc[1]
    assert (tmp_path / "transformer_hyper.csv").exists()


def test_hyper_sweep_respects_max_len(tmp_path):
    plan = training_plan(tmp_path, stages=["transformer_hyper"], transformer_grid={"max_len": [8]})
    with pytest.raises(ConfigError):
        harness.run_transformer_hyper_sweep(plan)


# ------------------------
# Reservoir grid
# ------------------------
def test_reservoir_grid(tmp_path):
    plan = climate_plan(tmp_path, stages=["reservoir_grid"], reservoir_train_lengths=[900, 1500],
                        reservoir_sizes=[20, 40], reservoir_realizations=2, horizon=200)
    frame = harness.run_reservoir_grid(plan)
    assert len(frame) == 2 * 2 * 2
    assert list(frame.columns[:4]) == ["config_hash", "train_length", "size", "realization"]
    assert frame.dv.between(0.0, 2.0).all()
    assert (frame.surrogate_dv > 0).all()
    first = (tmp_path / "reservoir_grid.csv").read_bytes()
    harness.run_reservoir_grid(plan)
    assert (tmp_path / "reservoir_grid.csv").read_bytes() == first


# ------------------------
# Search objectives
# ------------------------
def test_reservoir_objective_returns_dv(tmp_path):
    objective = harness.reservoir_objective(climate_plan(tmp_path, reservoir="lorenz"))
    value = objective({"size": 40, "washout": 50, "leak": 0.5})
    assert 0.0 <= value <= 2.0


@pytest.mark.slow
def test_rotation_writes_one_table(tmp_path):
    plan = harness.ExperimentPlan(
        name="rot", group_size=16, data_length=300, lengths=[16], sparsities=[0.5], realizations=2,
        eval_length=200, transformer={"epochs": 1, "max_len": 16, "steps_per_epoch": 2, "embed_dim": 8},
        output_dir=str(tmp_path),
    )
    table = harness.rotate_leave_out(plan, tmp_path / "rotation")
    assert set(table.rotation) == {0, 1}
    assert sorted(table.system) == sorted(s.name for s in dynsys.catalog())
    assert (tmp_path / "rotation" / "rotation.csv").exists()
